use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Architecture and training hyperparameters. The JSON form has exactly these
/// fields; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_embed: usize,
    pub patch_px: usize,
    pub image_size: usize,
    pub mask_ratio: f64,
    pub batch: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    pub temperature_init: f64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            d: 128,
            layers: 4,
            heads: 4,
            d_embed: 128,
            patch_px: 8,
            image_size: 32,
            mask_ratio: 0.5,
            batch: 128,
            lr: 1e-3,
            epochs: 30,
            seed: 0,
            temperature_init: (1.0f64 / 0.07).ln(),
        }
    }
}

impl ModelConfig {
    /// Width and depth used for the full-size experiments: 8 layers, hidden
    /// size 512, 8 heads.
    pub fn full_scale() -> Self {
        Self {
            d: 512,
            layers: 8,
            heads: 8,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_embed", self.d_embed),
            ("patch_px", self.patch_px),
            ("image_size", self.image_size),
            ("batch", self.batch),
            ("epochs", self.epochs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d = {} is not divisible by heads = {}",
                self.d, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_px) {
            return Err(ModelError::IndivisibleImage {
                width: self.image_size,
                height: self.image_size,
                patch: self.patch_px,
            });
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(ModelError::InvalidConfig(format!(
                "mask_ratio {} outside [0, 1)",
                self.mask_ratio
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !self.temperature_init.is_finite() {
            return Err(ModelError::InvalidConfig(
                "lr and temperature_init must be finite, lr non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Architectural switches of the tree encoder, mirroring the ablation rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderOptions {
    /// Full attention over the preorder sequence with learned positions and a
    /// leading class token, instead of subtree attention.
    pub sequential: bool,
    /// Add the azimuth embedding to node inputs.
    pub azimuth_pe: bool,
    /// Pool a virtual node connected to every node instead of the root.
    pub special_node: bool,
    /// Mask radicals unseen in training when building inference galleries.
    pub tree_mask: bool,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        Self {
            sequential: false,
            azimuth_pe: true,
            special_node: false,
            tree_mask: true,
        }
    }
}
