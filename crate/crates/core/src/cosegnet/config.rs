use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Channels of the four residual stages.
    pub stage_channels: Vec<usize>,
    pub units_per_stage: usize,
    /// Atrous rates of the two dilation-only stages.
    pub dilations: (usize, usize),
    /// Per-unit rate multipliers of the final stage; sets its unit count.
    pub multi_grid: Option<Vec<usize>>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64, 128],
            units_per_stage: 2,
            dilations: (2, 4),
            multi_grid: None,
        }
    }
}

impl EncoderConfig {
    pub const OUTPUT_STRIDE: usize = 8;

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels[3]
    }

    pub fn low_level_channels(&self) -> usize {
        self.stage_channels[0]
    }

    /// Dilation of every unit of the final stage.
    pub fn final_stage_rates(&self) -> Vec<usize> {
        match &self.multi_grid {
            Some(mg) => mg.iter().map(|m| m * self.dilations.1).collect(),
            None => vec![self.dilations.1; self.units_per_stage],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != 4 || self.stage_channels.contains(&0) {
            return Err(Error::Config(format!(
                "encoder needs four non-zero stage channel counts, got {:?}",
                self.stage_channels
            )));
        }
        if self.units_per_stage == 0 {
            return Err(Error::Config("units_per_stage must be >= 1".into()));
        }
        if self.dilations.0 == 0 || self.dilations.1 == 0 {
            return Err(Error::Config("encoder dilations must be >= 1".into()));
        }
        if let Some(mg) = &self.multi_grid {
            if mg.is_empty() || mg.contains(&0) {
                return Err(Error::Config(format!("invalid multi_grid {mg:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ChannelAttention {
    Se,
    Eca,
    #[default]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SpatialAttention {
    Msa,
    Aspp,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub danet: bool,
    pub se_reduction: usize,
    pub eca_gamma: f64,
    pub eca_b: f64,
    pub aspp_rates: Vec<usize>,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            channel: ChannelAttention::None,
            spatial: SpatialAttention::None,
            danet: false,
            se_reduction: 16,
            eca_gamma: 2.0,
            eca_b: 1.0,
            aspp_rates: vec![1, 2, 4, 8],
        }
    }
}

impl AttentionConfig {
    pub fn validate(&self, channels: usize, feature_size: usize) -> Result<()> {
        if self.danet && (self.channel != ChannelAttention::None || self.spatial != SpatialAttention::None) {
            return Err(Error::Config("danet excludes channel and spatial attention".into()));
        }
        if self.channel == ChannelAttention::Se
            && (self.se_reduction == 0 || channels % self.se_reduction != 0 || channels < self.se_reduction)
        {
            return Err(Error::Config(format!(
                "se_reduction {} must divide the {channels} bottleneck channels",
                self.se_reduction
            )));
        }
        if self.channel == ChannelAttention::Eca && !(self.eca_gamma > 0.0) {
            return Err(Error::Config("eca_gamma must be > 0".into()));
        }
        if self.spatial == SpatialAttention::Aspp {
            if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
                return Err(Error::Config(format!("invalid aspp_rates {:?}", self.aspp_rates)));
            }
            if let Some(r) = self.aspp_rates.iter().find(|&&r| r >= feature_size) {
                return Err(Error::Config(format!(
                    "aspp rate {r} pads beyond the {feature_size}x{feature_size} bottleneck"
                )));
            }
        }
        Ok(())
    }

    /// ECA kernel size: odd rounding of `|log2(C)/γ + b/γ|`, at least 1.
    pub fn eca_kernel(&self, channels: usize) -> usize {
        eca_kernel_size(channels, self.eca_gamma, self.eca_b)
    }
}

pub fn eca_kernel_size(channels: usize, gamma: f64, b: f64) -> usize {
    let t = ((channels as f64).log2() / gamma + b / gamma).abs() as usize;
    if t % 2 == 1 {
        t
    } else {
        t + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DecoderVariant {
    #[default]
    D1,
    D2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    pub d2_lowlevel_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { variant: DecoderVariant::D1, d2_lowlevel_channels: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub encoder: EncoderConfig,
    pub attention: AttentionConfig,
    pub decoder: DecoderConfig,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            encoder: EncoderConfig::default(),
            attention: AttentionConfig::default(),
            decoder: DecoderConfig::default(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % EncoderConfig::OUTPUT_STRIDE != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        self.encoder.validate()?;
        self.attention.validate(
            self.encoder.bottleneck_channels(),
            self.input_size / EncoderConfig::OUTPUT_STRIDE,
        )?;
        if self.decoder.d2_lowlevel_channels == 0 {
            return Err(Error::Config("d2_lowlevel_channels must be >= 1".into()));
        }
        Ok(())
    }
}
