//! Run configuration: every tunable of the pipeline in one TOML document.
//!
//! Unknown keys are rejected. Every field has a default, so an empty file is
//! a valid configuration equal to the `ours_8_12` preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Whole hybrid pipeline.
    Full,
    /// Radiance field branch only: pose encoder, normal head, field and
    /// geometry latent, supervised by the volume and normal losses.
    PdnerfOnly,
    /// Textural branch only.
    NoVol,
    /// Volumetric branch only.
    NoTex,
    /// Full pipeline with concatenation instead of gated fusion.
    ConcatFusion,
}

impl TrainMode {
    pub fn uses_volume(self) -> bool {
        self != TrainMode::NoVol
    }

    pub fn uses_texture(self) -> bool {
        !matches!(self, TrainMode::NoTex | TrainMode::PdnerfOnly)
    }

    pub fn uses_renderer(self) -> bool {
        self != TrainMode::PdnerfOnly
    }
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => TrainMode::Full,
            "pdnerf-only" => TrainMode::PdnerfOnly,
            "no-vol" => TrainMode::NoVol,
            "no-tex" => TrainMode::NoTex,
            "concat-fusion" => TrainMode::ConcatFusion,
            _ => return Err(Error::Config(format!("unknown mode `{s}` (full, pdnerf-only, no-vol, no-tex, concat-fusion)"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    Aff,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormChoice {
    Instance,
    Batch,
}

/// Ray marching through the dilated body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Downsampling factor of the radiance field image.
    pub downsample: usize,
    /// Samples per ray.
    pub samples: usize,
    /// Mesh dilation radius in meters.
    pub dilation: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig { downsample: 8, samples: 12, dilation: 0.12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the UV atlas, positional map and latents.
    pub uv_size: usize,
    /// Channels of each of the geometry and texture latents.
    pub latent_channels: usize,
    /// Output channels of the pose encoder.
    pub geo_channels: usize,
    /// Channels of the field's appearance feature (first three are RGB).
    pub feature_channels: usize,
    /// Channels of the textural features and the fused map.
    pub texture_channels: usize,
    pub mlp_width: usize,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub fusion: FusionMode,
    /// Bottleneck width of the fusion gate.
    pub gate_channels: usize,
    pub norm: NormChoice,
    /// Standard deviation of the latent initialization.
    pub latent_init: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            uv_size: 128,
            latent_channels: 16,
            geo_channels: 32,
            feature_channels: 16,
            texture_channels: 64,
            mlp_width: 256,
            pos_freqs: 6,
            dir_freqs: 4,
            fusion: FusionMode::Aff,
            gate_channels: 16,
            norm: NormChoice::Instance,
            latent_init: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub vol: f64,
    pub norm: f64,
    pub feat: f64,
    pub mask: f64,
    pub pix: f64,
    pub adv: f64,
    /// Kept for completeness; the face term is never evaluated.
    pub face: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { vol: 15.0, norm: 1.0, feat: 10.0, mask: 5.0, pix: 1.0, adv: 1.0, face: 5.0 }
    }
}

impl LossWeights {
    pub fn as_array(&self) -> [f64; 7] {
        [self.vol, self.norm, self.feat, self.mask, self.pix, self.adv, self.face]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Discriminator learning rate.
    pub disc_lr: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8, disc_lr: 2e-4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Rays rendered per step; 0 renders every hit ray.
    pub ray_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { mode: TrainMode::Full, iterations: 3000, seed: 0, checkpoint_every: 500, ray_batch: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub render: RenderConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub paths: PathConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: "ours_8_12".into(),
            render: RenderConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl RunConfig {
    /// Named starting points: `ours_S_N` for S in {4, 8, 16}.
    pub fn preset(name: &str) -> Result<Self> {
        let rest = name.strip_prefix("ours_").ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        let (s, n) = rest.split_once('_').ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
        let parse = |v: &str| v.parse::<usize>().map_err(|_| Error::Config(format!("unknown preset `{name}`")));
        let mut cfg = RunConfig { preset: name.to_string(), ..RunConfig::default() };
        cfg.render.downsample = parse(s)?;
        cfg.render.samples = parse(n)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Textural encoder depth: `2^n` equals the downsampling factor.
    pub fn texture_levels(&self) -> usize {
        self.render.downsample.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if ![4, 8, 16].contains(&self.render.downsample) {
            return bad(format!("render.downsample must be 4, 8 or 16, got {}", self.render.downsample));
        }
        if self.render.samples == 0 {
            return bad("render.samples must be positive".into());
        }
        if !(self.render.dilation > 0.0 && self.render.dilation.is_finite()) {
            return bad(format!("render.dilation must be positive, got {}", self.render.dilation));
        }
        let m = &self.model;
        if m.uv_size == 0 || !m.uv_size.is_multiple_of(8) {
            return bad(format!("model.uv_size must be a positive multiple of 8, got {}", m.uv_size));
        }
        if m.feature_channels < 3 {
            return bad("model.feature_channels must hold at least the three colour channels".into());
        }
        for (k, v) in [
            ("latent_channels", m.latent_channels),
            ("geo_channels", m.geo_channels),
            ("texture_channels", m.texture_channels),
            ("mlp_width", m.mlp_width),
            ("gate_channels", m.gate_channels),
        ] {
            if v == 0 {
                return bad(format!("model.{k} must be positive"));
            }
        }
        if self.loss.as_array().iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        let o = &self.optim;
        if !(o.lr >= 0.0 && o.disc_lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad("optimizer settings out of range".into());
        }
        Ok(())
    }

    /// Fusion actually used, after the mode override.
    pub fn fusion(&self) -> FusionMode {
        if self.train.mode == TrainMode::ConcatFusion {
            FusionMode::Concat
        } else {
            self.model.fusion
        }
    }
}
