use serde::{Deserialize, Serialize};

use crate::attention::AttentionKernel;
use crate::error::{Error, Result};
use crate::flow::RfConfig;
use crate::patch::GridDims;
use crate::rope::{PosScheme, RopeConfig};

/// Low-rank adapters on the conditional branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

/// Architecture and objective knobs of the joint model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch: usize,
    pub channels: usize,
    /// Noise / reference image size, `[height, width]` in pixels.
    pub image: [usize; 2],
    /// Garment canvas size, `[height, width]` in pixels.
    pub garment: [usize; 2],
    pub text_len: usize,
    /// Hidden width of the gated MLP as a multiple of `dim`.
    pub mlp_ratio: usize,
    pub rope_theta: f64,
    pub lora: Option<LoraConfig>,
    pub pos_scheme: PosScheme,
    pub mask_enabled: bool,
    pub kernel: AttentionKernel,
    pub rf: RfConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 64,
            heads: 4,
            blocks: 4,
            patch: 4,
            channels: 3,
            image: [32, 24],
            garment: [16, 16],
            text_len: 4,
            mlp_ratio: 2,
            rope_theta: 10_000.0,
            lora: None,
            pos_scheme: PosScheme::Shared,
            mask_enabled: true,
            kernel: AttentionKernel::BlockSkip,
            rf: RfConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            head_dim: self.head_dim(),
            theta: self.rope_theta,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_grid(&self) -> Result<GridDims> {
        GridDims::for_image(self.image[0], self.image[1], self.patch)
    }

    pub fn garment_grid(&self) -> Result<GridDims> {
        GridDims::for_image(self.garment[0], self.garment[1], self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::contract("model_config", d));
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dim % 2 != 0 {
            return bad("dim must be even for the time embedding".into());
        }
        if self.blocks == 0 || self.channels == 0 || self.mlp_ratio == 0 {
            return bad("blocks, channels and mlp_ratio must be positive".into());
        }
        self.rope().validate()?;
        self.image_grid()?;
        self.garment_grid()?;
        self.rf.validate()?;
        if let Some(l) = self.lora {
            if l.rank == 0 || l.rank > self.dim {
                return bad(format!("lora rank {} outside 1..={}", l.rank, self.dim));
            }
        }
        Ok(())
    }

    /// Same parameter shapes (image sizes may differ).
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.dim == other.dim
            && self.heads == other.heads
            && self.blocks == other.blocks
            && self.patch == other.patch
            && self.channels == other.channels
            && self.text_len == other.text_len
            && self.mlp_ratio == other.mlp_ratio
            && self.lora.map(|l| l.rank) == other.lora.map(|l| l.rank)
    }
}

/// Which parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPolicy {
    /// Every parameter.
    Full,
    /// Only the reference and garment projection branches (`W_Q/K/V/O`).
    ConditionalOnly,
    /// Only the LoRA adapters on the reference and garment branches.
    ConditionalLora,
}

impl TrainPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainPolicy::Full => "full",
            TrainPolicy::ConditionalOnly => "conditional_only",
            TrainPolicy::ConditionalLora => "conditional_lora",
        }
    }
}

impl std::str::FromStr for TrainPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainPolicy::Full),
            "conditional_only" => Ok(TrainPolicy::ConditionalOnly),
            "conditional_lora" => Ok(TrainPolicy::ConditionalLora),
            other => Err(Error::contract("set_trainable", format!("unknown policy '{other}'"))),
        }
    }
}
