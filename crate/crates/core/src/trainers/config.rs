use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::diffusion::ScheduleKind;
use crate::losses::{GeneratorLoss, SmoothingConfig};
use crate::models::{Algorithm, ModelDims};
use crate::nn::{ClipMode, OptimizerKind};
use crate::toydata::DistributionSpec;

pub const CONFIG_VERSION: u32 = 1;

/// A complete, validated experiment description. Sections mirror the TOML
/// layout accepted by the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub model: ModelSection,
    pub data: DataSpec,
    #[serde(default)]
    pub optim: OptimSection,
    #[serde(default)]
    pub regularizers: Regularizers,
    #[serde(default)]
    pub diffusion: DiffusionSection,
}

fn default_version() -> u32 {
    CONFIG_VERSION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub algorithm: Algorithm,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_eval_samples")]
    pub eval_samples: usize,
    /// Discriminator updates per generator update (5 for the WGAN family, else 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_critic: Option<usize>,
    #[serde(default)]
    pub unroll_k: usize,
}

fn default_steps() -> usize {
    2000
}
fn default_batch() -> usize {
    64
}
fn default_eval_every() -> usize {
    250
}
fn default_eval_samples() -> usize {
    2000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_z_dim")]
    pub z_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "one")]
    pub pack_k: usize,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    /// Categorical code size for InfoGAN; 0 means "number of target modes".
    #[serde(default)]
    pub code_k: usize,
}

fn default_z_dim() -> usize {
    100
}
fn default_hidden() -> Vec<usize> {
    vec![128, 128]
}
fn one() -> usize {
    1
}
fn default_embed_dim() -> usize {
    8
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            z_dim: default_z_dim(),
            hidden: default_hidden(),
            pack_k: 1,
            embed_dim: default_embed_dim(),
            code_k: 0,
        }
    }
}

/// Training data: a sampled distribution or one of the paired/unpaired
/// translation datasets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSpec {
    Gaussian1d {
        mean: f64,
        std: f64,
    },
    Ring {
        #[serde(default = "default_modes")]
        modes: usize,
        #[serde(default = "default_radius")]
        radius: f64,
        #[serde(default = "default_mixture_std")]
        std: f64,
    },
    Grid {
        side: usize,
        spacing: f64,
        std: f64,
    },
    Labeled {
        centers: Vec<Vec<f64>>,
        std: f64,
    },
    /// `y = R(pi/4) x + noise` pairs for the supervised translation task.
    Paired {
        #[serde(default = "default_pair_noise")]
        noise_std: f64,
    },
    /// Unaligned ring domains for the cycle-consistent translation task.
    TwoDomain,
}

fn default_modes() -> usize {
    8
}
fn default_radius() -> f64 {
    2.0
}
fn default_mixture_std() -> f64 {
    0.05
}
fn default_pair_noise() -> f64 {
    crate::toydata::PAIRED_NOISE_STD
}

impl DataSpec {
    pub fn distribution(&self) -> Option<DistributionSpec> {
        Some(match self {
            DataSpec::Gaussian1d { mean, std } => DistributionSpec::Gaussian1D {
                mean: *mean,
                std: *std,
            },
            DataSpec::Ring { modes, radius, std } => DistributionSpec::MixtureRing {
                modes: *modes,
                radius: *radius,
                std: *std,
            },
            DataSpec::Grid { side, spacing, std } => DistributionSpec::MixtureGrid {
                side: *side,
                spacing: *spacing,
                std: *std,
            },
            DataSpec::Labeled { centers, std } => DistributionSpec::LabeledMixture {
                centers: centers.clone(),
                std: *std,
            },
            DataSpec::Paired { .. } | DataSpec::TwoDomain => return None,
        })
    }

    pub fn from_distribution(d: &DistributionSpec) -> DataSpec {
        match d.clone() {
            DistributionSpec::Gaussian1D { mean, std } => DataSpec::Gaussian1d { mean, std },
            DistributionSpec::MixtureRing { modes, radius, std } => {
                DataSpec::Ring { modes, radius, std }
            }
            DistributionSpec::MixtureGrid { side, spacing, std } => {
                DataSpec::Grid { side, spacing, std }
            }
            DistributionSpec::LabeledMixture { centers, std } => DataSpec::Labeled { centers, std },
        }
    }

    pub fn dim(&self) -> usize {
        self.distribution().map_or(2, |d| d.dim())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimChoice {
    /// Adam, except RMSProp for weight-clipped WGAN.
    Auto,
    Adam,
    Rmsprop,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    #[serde(default = "default_optim")]
    pub kind: OptimChoice,
    /// Shared learning rate; defaults to 2e-4 (5e-5 for RMSProp).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_d: Option<f64>,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
}

fn default_optim() -> OptimChoice {
    OptimChoice::Auto
}
fn default_beta1() -> f64 {
    0.5
}
fn default_beta2() -> f64 {
    0.999
}

impl Default for OptimSection {
    fn default() -> Self {
        OptimSection {
            kind: OptimChoice::Auto,
            lr: None,
            lr_g: None,
            lr_d: None,
            beta1: default_beta1(),
            beta2: default_beta2(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradClip {
    pub mode: ClipMode,
    pub bound: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayConfig {
    pub capacity: usize,
    pub mix_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Regularizers {
    #[serde(default)]
    pub smoothing: SmoothingConfig,
    #[serde(default)]
    pub input_noise_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<GradClip>,
    /// Gaussian noise added to discriminator gradients.
    #[serde(default)]
    pub dp_noise_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<ReplayConfig>,
    #[serde(default)]
    pub spectral_norm: bool,
    #[serde(default)]
    pub feature_matching_weight: f64,
    #[serde(default = "default_gp_lambda")]
    pub gp_lambda: f64,
    #[serde(default = "default_clip_c")]
    pub clip_c: f64,
    #[serde(default = "default_l1_lambda")]
    pub l1_lambda: f64,
    #[serde(default = "default_cycle_lambda")]
    pub cycle_lambda: f64,
    #[serde(default = "default_info_lambda")]
    pub info_lambda: f64,
    #[serde(default = "default_g_loss")]
    pub g_loss: GeneratorLoss,
}

fn default_gp_lambda() -> f64 {
    10.0
}
fn default_clip_c() -> f64 {
    0.01
}
fn default_l1_lambda() -> f64 {
    100.0
}
fn default_cycle_lambda() -> f64 {
    10.0
}
fn default_info_lambda() -> f64 {
    1.0
}
fn default_g_loss() -> GeneratorLoss {
    GeneratorLoss::Nonsaturating
}

impl Default for Regularizers {
    fn default() -> Self {
        Regularizers {
            smoothing: SmoothingConfig::default(),
            input_noise_std: 0.0,
            grad_clip: None,
            dp_noise_std: 0.0,
            replay: None,
            spectral_norm: false,
            feature_matching_weight: 0.0,
            gp_lambda: default_gp_lambda(),
            clip_c: default_clip_c(),
            l1_lambda: default_l1_lambda(),
            cycle_lambda: default_cycle_lambda(),
            info_lambda: default_info_lambda(),
            g_loss: default_g_loss(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSection {
    #[serde(default = "default_timesteps")]
    pub timesteps: usize,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleKind,
    /// Denoiser learning rate (Adam with the optimizer section's betas).
    #[serde(default = "default_diffusion_lr")]
    pub lr: f64,
}

fn default_timesteps() -> usize {
    1000
}
fn default_schedule() -> ScheduleKind {
    ScheduleKind::Linear {
        start: 1e-4,
        end: 0.02,
    }
}
fn default_diffusion_lr() -> f64 {
    1e-3
}

impl Default for DiffusionSection {
    fn default() -> Self {
        DiffusionSection {
            timesteps: default_timesteps(),
            schedule: default_schedule(),
            lr: default_diffusion_lr(),
        }
    }
}

impl TrainConfig {
    /// Minimal config with every other field at its default.
    pub fn new(algorithm: Algorithm, data: DataSpec) -> Self {
        TrainConfig {
            version: CONFIG_VERSION,
            experiment: ExperimentSection {
                algorithm,
                seed: 0,
                steps: default_steps(),
                batch: default_batch(),
                eval_every: default_eval_every(),
                eval_samples: default_eval_samples(),
                n_critic: None,
                unroll_k: 0,
            },
            model: ModelSection::default(),
            data,
            optim: OptimSection::default(),
            regularizers: Regularizers::default(),
            diffusion: DiffusionSection::default(),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.experiment.algorithm
    }

    pub fn n_critic(&self) -> usize {
        self.experiment
            .n_critic
            .unwrap_or(if self.algorithm().is_wgan() { 5 } else { 1 })
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        let o = &self.optim;
        match o.kind {
            OptimChoice::Adam => OptimizerKind::adam(o.beta1, o.beta2),
            OptimChoice::Rmsprop => OptimizerKind::rmsprop(),
            OptimChoice::Sgd => OptimizerKind::Sgd,
            OptimChoice::Auto if self.algorithm() == Algorithm::WganClip => {
                OptimizerKind::rmsprop()
            }
            OptimChoice::Auto => OptimizerKind::adam(o.beta1, o.beta2),
        }
    }

    fn base_lr(&self) -> f64 {
        self.optim.lr.unwrap_or(match self.optimizer_kind() {
            OptimizerKind::RmsProp { .. } => 5e-5,
            _ => 2e-4,
        })
    }

    pub fn lr_g(&self) -> f64 {
        self.optim.lr_g.unwrap_or_else(|| self.base_lr())
    }

    pub fn lr_d(&self) -> f64 {
        self.optim.lr_d.unwrap_or_else(|| self.base_lr())
    }

    pub fn data_dim(&self) -> usize {
        self.data.dim()
    }

    pub fn num_modes(&self) -> usize {
        self.data.distribution().map_or(1, |d| d.num_modes())
    }

    pub fn model_dims(&self) -> ModelDims {
        let m = &self.model;
        ModelDims {
            z_dim: m.z_dim,
            data_dim: self.data_dim(),
            hidden: m.hidden.clone(),
            pack_k: m.pack_k,
            num_classes: self.num_modes(),
            code_k: if m.code_k == 0 {
                self.num_modes()
            } else {
                m.code_k
            },
            embed_dim: m.embed_dim,
            spectral_norm: self.regularizers.spectral_norm,
            feature_tap: (self.regularizers.feature_matching_weight > 0.0)
                .then(|| m.hidden.len().saturating_sub(1)),
        }
    }

    /// Fill every algorithm-dependent default so the config prints explicitly.
    pub fn resolve(&mut self) {
        self.experiment.n_critic = Some(self.n_critic());
        let (lr_g, lr_d) = (self.lr_g(), self.lr_d());
        self.optim.lr = Some(self.base_lr());
        self.optim.lr_g = Some(lr_g);
        self.optim.lr_d = Some(lr_d);
        if self.optim.kind == OptimChoice::Auto {
            self.optim.kind = match self.optimizer_kind() {
                OptimizerKind::RmsProp { .. } => OptimChoice::Rmsprop,
                _ => OptimChoice::Adam,
            };
        }
        if self.model.code_k == 0 && self.algorithm() == Algorithm::Infogan {
            self.model.code_k = self.num_modes();
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, msg: String| {
            Err(TrainError::Config {
                key: key.to_string(),
                msg,
            })
        };
        let e = &self.experiment;
        let alg = e.algorithm;
        if self.version != CONFIG_VERSION {
            return bad(
                "version",
                format!(
                    "unsupported version {}; expected {CONFIG_VERSION}",
                    self.version
                ),
            );
        }
        if e.steps == 0 {
            return bad("experiment.steps", "must be positive".into());
        }
        if e.batch == 0 {
            return bad("experiment.batch", "must be positive".into());
        }
        if e.eval_every == 0 {
            return bad("experiment.eval_every", "must be positive".into());
        }
        if e.eval_samples < 2 {
            return bad("experiment.eval_samples", "must be at least 2".into());
        }
        if self.n_critic() == 0 {
            return bad("experiment.n_critic", "must be at least 1".into());
        }
        let pack_k = self.model.pack_k;
        if pack_k == 0 {
            return bad("model.pack_k", "must be positive".into());
        }
        if !e.batch.is_multiple_of(pack_k) {
            return bad(
                "model.pack_k",
                format!("batch {} is not divisible by pack_k {pack_k}", e.batch),
            );
        }
        if !e.eval_samples.is_multiple_of(pack_k) {
            return bad(
                "model.pack_k",
                format!(
                    "eval_samples {} is not divisible by pack_k {pack_k}",
                    e.eval_samples
                ),
            );
        }
        if self.model.z_dim == 0 || self.model.hidden.contains(&0) {
            return bad("model", "z_dim and hidden widths must be positive".into());
        }
        match (alg, &self.data) {
            (Algorithm::Pix2pixToy, DataSpec::Paired { noise_std }) => {
                if !(*noise_std >= 0.0) {
                    return bad("data.noise_std", "must be nonnegative".into());
                }
            }
            (Algorithm::Pix2pixToy, _) => {
                return bad("data.kind", "pix2pix_toy needs kind = \"paired\"".into())
            }
            (Algorithm::CycleganToy, DataSpec::TwoDomain) => {}
            (Algorithm::CycleganToy, _) => {
                return bad(
                    "data.kind",
                    "cyclegan_toy needs kind = \"two_domain\"".into(),
                );
            }
            (_, DataSpec::Paired { .. } | DataSpec::TwoDomain) => {
                return bad(
                    "data.kind",
                    format!(
                        "{} needs one of gaussian1d, ring, grid, labeled",
                        alg.name()
                    ),
                );
            }
            (_, data) => {
                if let Err(err) = data
                    .distribution()
                    .expect("sampled distribution")
                    .validate()
                {
                    return bad("data", err.to_string());
                }
            }
        }
        if alg == Algorithm::Cgan && self.num_modes() < 2 {
            return bad(
                "data.kind",
                "cgan needs a mixture with at least two modes".into(),
            );
        }
        if alg == Algorithm::Infogan {
            let k = self.model_dims().code_k;
            if k < 2 || k >= self.model.z_dim {
                return bad(
                    "model.code_k",
                    format!("needs 2 <= code_k < z_dim, got {k}"),
                );
            }
        }
        let unrollable = matches!(
            alg,
            Algorithm::Vanilla
                | Algorithm::WganClip
                | Algorithm::WganGp
                | Algorithm::Lsgan
                | Algorithm::Hinge
                | Algorithm::Ebgan
                | Algorithm::Infogan
        );
        if e.unroll_k > 0 && !unrollable {
            return bad(
                "experiment.unroll_k",
                format!("not supported for {}", alg.name()),
            );
        }
        let r = &self.regularizers;
        r.smoothing
            .validate()
            .or_else(|err| bad("regularizers.smoothing", err.to_string()))?;
        for (key, v) in [
            ("regularizers.input_noise_std", r.input_noise_std),
            ("regularizers.dp_noise_std", r.dp_noise_std),
            (
                "regularizers.feature_matching_weight",
                r.feature_matching_weight,
            ),
            ("regularizers.gp_lambda", r.gp_lambda),
            ("regularizers.l1_lambda", r.l1_lambda),
            ("regularizers.cycle_lambda", r.cycle_lambda),
            ("regularizers.info_lambda", r.info_lambda),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be a finite nonnegative number, got {v}"));
            }
        }
        if !(r.clip_c > 0.0) {
            return bad("regularizers.clip_c", "must be positive".into());
        }
        if let Some(c) = r.grad_clip {
            if !(c.bound > 0.0) {
                return bad("regularizers.grad_clip.bound", "must be positive".into());
            }
        }
        if let Some(rp) = r.replay {
            if rp.capacity == 0 || !(0.0..=1.0).contains(&rp.mix_fraction) {
                return bad(
                    "regularizers.replay",
                    "capacity must be positive and mix_fraction in [0, 1]".into(),
                );
            }
        }
        if r.feature_matching_weight > 0.0
            && (self.model.hidden.is_empty() || alg == Algorithm::Ebgan)
        {
            return bad(
                "regularizers.feature_matching_weight",
                "needs a discriminator with hidden layers (not ebgan)".into(),
            );
        }
        for (key, v) in [
            ("optim.lr", self.base_lr()),
            ("optim.lr_g", self.lr_g()),
            ("optim.lr_d", self.lr_d()),
            ("diffusion.lr", self.diffusion.lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, format!("must be a finite nonnegative number, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("optim.beta1", "betas must lie in [0, 1)".into());
        }
        if alg == Algorithm::Ddpm {
            if self.diffusion.timesteps == 0 {
                return bad("diffusion.timesteps", "must be positive".into());
            }
            self.diffusion
                .schedule
                .build(self.diffusion.timesteps)
                .map_err(|err| TrainError::Config {
                    key: "diffusion.schedule".into(),
                    msg: err.to_string(),
                })?;
        }
        Ok(())
    }
}
