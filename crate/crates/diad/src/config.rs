//! Run configuration: a nested TOML document with two shipped presets.

use std::path::{Path, PathBuf};

use diad_core::autoencoder::AutoencoderConfig;
use diad_core::denoiser::{ConnectionVariant, DenoiserConfig, SgEncoderWeights, SgInput};
use diad_core::diffusion::NoiseSchedule;
use diad_core::metrics::{MetricsConfig, PixelAveraging};
use diad_core::scoring::{PoolingMode, ReconstructionConfig, ScoringConfig};
use diad_core::sff::SffNorm;
use diad_core::synth::{Injector, SyntheticSpec, Texture};
use diad_core::training::{Phase, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub scoring: ScoringSection,
    pub metrics: MetricsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    /// `synthetic` or `mvtec`.
    pub source: String,
    /// Corpus location; relative paths resolve against the output root.
    pub root: PathBuf,
    pub image_size: usize,
    pub synthetic: SyntheticSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSection {
    pub num_categories: usize,
    pub train_per_category: usize,
    pub test_good_per_category: usize,
    pub test_defect_per_category: usize,
    pub textures: Vec<String>,
    pub injectors: Vec<String>,
    pub rect_area: [f64; 2],
    pub stain_radius: [f64; 2],
    pub scratch_width: [f64; 2],
    pub intensity_delta: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub autoencoder: AutoencoderSection,
    pub denoiser: DenoiserSection,
    pub schedule: ScheduleSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderSection {
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    pub attention_levels: Vec<usize>,
    pub num_heads: usize,
    pub time_embed_dim: usize,
    pub hint_channels: Vec<usize>,
    /// `sd`, `msg`, `msg-sgeb3`, `msg-sgeb3-sgeb4` or `msg-sff`.
    pub connection: String,
    /// `in-silu` or `bn-relu`.
    pub sff_norm: String,
    /// `clone` or `shared`.
    pub sg_encoder: String,
    /// `noisy` or `clean`.
    pub sg_input: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_accumulation: usize,
    pub weight_decay: f64,
    /// Zero means no limit.
    pub max_batches: u64,
    pub kl_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub autoencoder: PhaseSection,
    pub pretrain_sd: PhaseSection,
    pub train_sg: PhaseSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    pub feature_levels: Vec<usize>,
    pub sigma: f64,
    pub pooling_iterations: usize,
    pub pooling_kernel: usize,
    /// `stride1` or `downsample`.
    pub pooling_mode: String,
    pub forward_t: usize,
    pub ddim_steps: usize,
    pub backbone_widths: Vec<usize>,
    pub backbone_seed: u64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub pro_fpr_limit: f64,
    /// `pooled` or `per-image`.
    pub pixel_averaging: String,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn phase(epochs: usize, batch_size: usize, learning_rate: f64) -> PhaseSection {
    PhaseSection {
        epochs,
        batch_size,
        learning_rate,
        grad_accumulation: 1,
        weight_decay: 0.0,
        max_batches: 0,
        kl_weight: 1e-6,
    }
}

impl RunConfig {
    pub const PRESETS: [&'static str; 2] = ["desk", "paper-reference"];

    /// 64×64 synthetic corpus and small networks, sized for a CPU.
    pub fn desk() -> Self {
        Self {
            seed: 7,
            dataset: DatasetSection {
                source: "synthetic".into(),
                root: PathBuf::from("data"),
                image_size: 64,
                synthetic: SyntheticSection {
                    num_categories: 3,
                    train_per_category: 60,
                    test_good_per_category: 12,
                    test_defect_per_category: 12,
                    textures: Texture::ALL.iter().map(|t| t.name().into()).collect(),
                    injectors: Injector::ALL.iter().map(|t| t.name().into()).collect(),
                    rect_area: [0.15, 0.3],
                    stain_radius: [0.08, 0.16],
                    scratch_width: [1.0, 2.0],
                    intensity_delta: 40,
                },
            },
            model: ModelSection {
                autoencoder: AutoencoderSection {
                    latent_channels: 4,
                    base_channels: 16,
                    channel_multipliers: vec![1, 2, 4],
                    res_blocks: 1,
                },
                denoiser: DenoiserSection {
                    base_channels: 16,
                    channel_multipliers: vec![1, 2, 4, 4],
                    res_blocks_per_level: 1,
                    attention_levels: vec![3],
                    num_heads: 4,
                    time_embed_dim: 128,
                    hint_channels: vec![16, 32, 64],
                    connection: "msg-sff".into(),
                    sff_norm: "in-silu".into(),
                    sg_encoder: "clone".into(),
                    sg_input: "noisy".into(),
                },
                schedule: ScheduleSection {
                    steps: 1000,
                    beta_start: 1e-4,
                    beta_end: 0.02,
                },
            },
            training: TrainingSection {
                autoencoder: phase(10, 8, 1e-3),
                pretrain_sd: phase(20, 8, 1e-3),
                train_sg: phase(30, 8, 1e-3),
            },
            scoring: ScoringSection {
                feature_levels: vec![2, 3, 4],
                sigma: 4.0,
                pooling_iterations: 8,
                pooling_kernel: 8,
                pooling_mode: "stride1".into(),
                forward_t: 100,
                ddim_steps: 10,
                backbone_widths: vec![16, 32, 64, 96, 128],
                backbone_seed: 3,
                batch_size: 16,
            },
            metrics: MetricsSection {
                pro_fpr_limit: 0.3,
                pixel_averaging: "pooled".into(),
            },
        }
    }

    /// Full-scale hyperparameters at 256×256. Not runnable on a desk CPU.
    pub fn paper_reference() -> Self {
        let mut c = Self::desk();
        c.dataset.source = "mvtec".into();
        c.dataset.root = PathBuf::from("mvtec_ad");
        c.dataset.image_size = 256;
        c.model.autoencoder = AutoencoderSection {
            latent_channels: 4,
            base_channels: 128,
            channel_multipliers: vec![1, 2, 4, 4],
            res_blocks: 2,
        };
        c.model.denoiser = DenoiserSection {
            base_channels: 320,
            channel_multipliers: vec![1, 2, 4, 4],
            res_blocks_per_level: 2,
            attention_levels: vec![0, 1, 2],
            num_heads: 8,
            time_embed_dim: 1280,
            hint_channels: vec![16, 32, 96, 256],
            ..c.model.denoiser
        };
        let p = PhaseSection {
            grad_accumulation: 4,
            ..phase(1000, 12, 1e-5)
        };
        c.training = TrainingSection {
            autoencoder: p.clone(),
            pretrain_sd: p.clone(),
            train_sg: p,
        };
        c.scoring.sigma = 5.0;
        c.scoring.forward_t = 1000;
        c.scoring.backbone_widths = vec![64, 256, 512, 1024, 2048];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-reference" => Ok(Self::paper_reference()),
            _ => Err(Error::Usage(format!(
                "unknown preset {name:?}; expected one of {:?}",
                Self::PRESETS
            ))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| bad(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        toml::from_str(&text).map_err(|e| Error::format(path, e))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        std::fs::write(path, self.to_toml()).at(path)
    }

    /// Applies `dotted.key=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = toml::Table::try_from(self).map_err(|e| bad(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts: Vec<&str> = key.trim().split('.').collect();
            let last = parts.pop().expect("split yields one part");
            let mut table = &mut doc;
            for p in parts {
                table = table
                    .get_mut(p)
                    .and_then(|v| v.as_table_mut())
                    .ok_or_else(|| {
                        Error::Usage(format!("unknown config section {p:?} in {key:?}"))
                    })?;
            }
            if !table.contains_key(last) {
                return Err(Error::Usage(format!("unknown config key {key:?}")));
            }
            table.insert(last.to_string(), value);
        }
        let c: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| bad(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn short_hash(&self) -> String {
        self.hash()[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.dataset.source.as_str(), "synthetic" | "mvtec") {
            return Err(bad(format!(
                "dataset.source must be synthetic or mvtec, got {:?}",
                self.dataset.source
            )));
        }
        self.autoencoder()?.validate()?;
        self.denoiser()?.validate()?;
        self.schedule()?;
        self.synthetic()?.validate()?;
        for p in [Phase::TrainAutoencoder, Phase::PretrainSd, Phase::TrainSg] {
            self.train_config(p).validate()?;
        }
        let s = self.scoring()?;
        s.validate(self.scoring.backbone_widths.len())?;
        let steps = self.model.schedule.steps;
        let r = self.reconstruction();
        if r.forward_t == 0
            || r.forward_t > steps
            || r.ddim_steps == 0
            || r.ddim_steps > r.forward_t
        {
            return Err(bad(format!(
                "need 1 <= ddim_steps <= forward_t <= {steps}, got {} and {}",
                r.ddim_steps, r.forward_t
            )));
        }
        let side = 1usize << self.scoring.backbone_widths.len();
        if !self.dataset.image_size.is_multiple_of(side) {
            return Err(bad(format!(
                "image_size must be a multiple of {side} for the backbone"
            )));
        }
        if self.scoring.batch_size == 0 {
            return Err(bad("scoring.batch_size must be positive"));
        }
        self.metrics()?;
        Ok(())
    }

    pub fn autoencoder(&self) -> Result<AutoencoderConfig> {
        let a = &self.model.autoencoder;
        let c = AutoencoderConfig {
            latent_channels: a.latent_channels,
            base_channels: a.base_channels,
            channel_multipliers: a.channel_multipliers.clone(),
            res_blocks: a.res_blocks,
        };
        c.validate()?;
        c.latent_shape(self.dataset.image_size, self.dataset.image_size)?;
        Ok(c)
    }

    pub fn denoiser(&self) -> Result<DenoiserConfig> {
        let ae = self.autoencoder()?;
        let d = &self.model.denoiser;
        let connection = ConnectionVariant::from_name(&d.connection)
            .ok_or_else(|| bad(format!("unknown connection variant {:?}", d.connection)))?;
        let sff_norm = match d.sff_norm.as_str() {
            "in-silu" => SffNorm::InstanceSilu,
            "bn-relu" => SffNorm::BatchRelu,
            o => return Err(bad(format!("unknown sff_norm {o:?}"))),
        };
        let sg_encoder = match d.sg_encoder.as_str() {
            "clone" => SgEncoderWeights::Clone,
            "shared" => SgEncoderWeights::SharedSd,
            o => return Err(bad(format!("unknown sg_encoder {o:?}"))),
        };
        let sg_input = match d.sg_input.as_str() {
            "noisy" => SgInput::Noisy,
            "clean" => SgInput::Clean,
            o => return Err(bad(format!("unknown sg_input {o:?}"))),
        };
        Ok(DenoiserConfig {
            latent_channels: ae.latent_channels,
            latent_size: self.dataset.image_size / ae.downsample_factor(),
            base_channels: d.base_channels,
            channel_multipliers: d.channel_multipliers.clone(),
            res_blocks_per_level: d.res_blocks_per_level,
            attention_levels: d.attention_levels.clone(),
            num_heads: d.num_heads,
            time_embed_dim: d.time_embed_dim,
            hint_channels: d.hint_channels.clone(),
            hint_downsample: ae.downsample_factor(),
            connection,
            sff_norm,
            sg_encoder,
            sg_input,
            num_classes: 0,
        })
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.model.schedule;
        Ok(NoiseSchedule::linear(s.steps, s.beta_start, s.beta_end)?)
    }

    pub fn synthetic(&self) -> Result<SyntheticSpec> {
        let s = &self.dataset.synthetic;
        let textures = s
            .textures
            .iter()
            .map(|t| Texture::from_name(t).ok_or_else(|| bad(format!("unknown texture {t:?}"))))
            .collect::<Result<_>>()?;
        let injectors = s
            .injectors
            .iter()
            .map(|t| Injector::from_name(t).ok_or_else(|| bad(format!("unknown injector {t:?}"))))
            .collect::<Result<_>>()?;
        Ok(SyntheticSpec {
            num_categories: s.num_categories,
            image_size: self.dataset.image_size,
            train_per_category: s.train_per_category,
            test_good_per_category: s.test_good_per_category,
            test_defect_per_category: s.test_defect_per_category,
            textures,
            injectors,
            rect_area: (s.rect_area[0], s.rect_area[1]),
            stain_radius: (s.stain_radius[0], s.stain_radius[1]),
            scratch_width: (s.scratch_width[0], s.scratch_width[1]),
            intensity_delta: s.intensity_delta,
            seed: self.seed,
        })
    }

    pub fn phase_section(&self, phase: Phase) -> &PhaseSection {
        match phase {
            Phase::TrainAutoencoder => &self.training.autoencoder,
            Phase::PretrainSd => &self.training.pretrain_sd,
            Phase::TrainSg => &self.training.train_sg,
        }
    }

    pub fn train_config(&self, phase: Phase) -> TrainConfig {
        let p = self.phase_section(phase);
        TrainConfig {
            phase,
            epochs: p.epochs,
            batch_size: p.batch_size,
            learning_rate: p.learning_rate,
            grad_accumulation: p.grad_accumulation,
            weight_decay: p.weight_decay,
            seed: self.seed,
            max_batches: (p.max_batches > 0).then_some(p.max_batches),
            kl_weight: p.kl_weight,
        }
    }

    pub fn scoring(&self) -> Result<ScoringConfig> {
        let s = &self.scoring;
        let pooling_mode = match s.pooling_mode.as_str() {
            "stride1" => PoolingMode::Stride1,
            "downsample" => PoolingMode::Downsample,
            o => return Err(bad(format!("unknown pooling_mode {o:?}"))),
        };
        Ok(ScoringConfig {
            feature_levels: s.feature_levels.clone(),
            sigma: s.sigma,
            pooling_iterations: s.pooling_iterations,
            pooling_kernel: s.pooling_kernel,
            pooling_mode,
        })
    }

    pub fn reconstruction(&self) -> ReconstructionConfig {
        ReconstructionConfig {
            forward_t: self.scoring.forward_t,
            ddim_steps: self.scoring.ddim_steps,
            seed: self.seed,
        }
    }

    pub fn metrics(&self) -> Result<MetricsConfig> {
        let pixel_averaging = match self.metrics.pixel_averaging.as_str() {
            "pooled" => PixelAveraging::Pooled,
            "per-image" => PixelAveraging::PerImage,
            o => return Err(bad(format!("unknown pixel_averaging {o:?}"))),
        };
        Ok(MetricsConfig {
            pro_fpr_limit: self.metrics.pro_fpr_limit,
            pixel_averaging,
        })
    }
}
