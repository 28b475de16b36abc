use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the feed-forward sub-block input is formed from the attention output
/// `m` and the encoder input `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnInput {
    /// `FFN(LN(m + z))`
    #[default]
    NormalizedSum,
    /// `FFN(LN(m) + z)`
    SumOfNormalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub cube_side: usize,
    pub max_seq_len: usize,
    pub conv_filters: Vec<usize>,
    pub num_encoders: usize,
    pub num_heads: usize,
    /// Hidden width of the feed-forward block; `None` means four times the
    /// embedding width.
    pub ffn_hidden: Option<usize>,
    pub num_classes: usize,
    pub ffn_input: FfnInput,
    pub final_layer_norm: bool,
    pub layer_norm_eps: f64,
    /// Cube intensities are standardized as `(v - input_mean) / input_std`.
    pub input_mean: f64,
    pub input_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            cube_side: 29,
            max_seq_len: 30,
            conv_filters: vec![16, 32, 64, 128],
            num_encoders: 12,
            num_heads: 8,
            ffn_hidden: None,
            num_classes: 2,
            ffn_input: FfnInput::NormalizedSum,
            final_layer_norm: false,
            layer_norm_eps: 1e-6,
            input_mean: 0.0,
            input_std: 1.0,
        }
    }
}

impl ModelConfig {
    /// Spatial side of the feature maps: the input side followed by the side
    /// after each conv + pool stage.
    pub fn spatial_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.cube_side];
        for _ in &self.conv_filters {
            let last = *sizes.last().unwrap();
            sizes.push(last / 2);
        }
        sizes
    }

    /// `H`, the side of the final feature map.
    pub fn feature_side(&self) -> usize {
        *self.spatial_sizes().last().unwrap()
    }

    /// `C`, the channel count of the final feature map.
    pub fn feature_channels(&self) -> usize {
        *self.conv_filters.last().unwrap_or(&0)
    }

    /// `D = C * H^3`.
    pub fn embed_dim(&self) -> usize {
        self.feature_channels() * self.feature_side().pow(3)
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_hidden.unwrap_or(4 * self.embed_dim())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim() / self.num_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_filters.len() != 4 {
            return Err(Error::config(format!(
                "conv_filters must have exactly 4 entries, got {}",
                self.conv_filters.len()
            )));
        }
        if self.conv_filters[0] == 0
            || self.conv_filters.windows(2).any(|w| w[1] != 2 * w[0])
        {
            return Err(Error::config(format!(
                "conv_filters must double at every stage, got {:?}",
                self.conv_filters
            )));
        }
        if self.feature_side() == 0 {
            return Err(Error::config(format!(
                "cube_side {} is too small for four pooling stages (needs >= 16)",
                self.cube_side
            )));
        }
        if self.max_seq_len < 1 {
            return Err(Error::config("max_seq_len must be at least 1"));
        }
        if self.num_encoders < 1 {
            return Err(Error::config("num_encoders must be at least 1"));
        }
        if self.num_heads == 0 || !self.embed_dim().is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embedding width {} is not divisible by num_heads {}",
                self.embed_dim(),
                self.num_heads
            )));
        }
        if self.ffn_width() == 0 {
            return Err(Error::config("ffn_hidden must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if !(self.layer_norm_eps >= 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::config("layer_norm_eps must be a finite value >= 0"));
        }
        if !(self.input_std > 0.0 && self.input_std.is_finite() && self.input_mean.is_finite()) {
            return Err(Error::config("input_std must be positive and input_mean finite"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_chain() {
        let c = ModelConfig::default();
        // floor(s / 2) per stage
        let mut oracle = vec![29usize];
        for _ in 0..4 {
            oracle.push(oracle.last().unwrap() / 2);
        }
        assert_eq!(c.spatial_sizes(), oracle);
        assert_eq!(c.spatial_sizes(), vec![29, 14, 7, 3, 1]);
        assert_eq!(c.embed_dim(), 128);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.ffn_width(), 512);
        c.validate().unwrap();
    }

    #[test]
    fn small_cubes_are_rejected() {
        let c = ModelConfig {
            cube_side: 15,
            ..ModelConfig::default()
        };
        assert_eq!(c.feature_side(), 0);
        assert!(c.validate().unwrap_err().is_config());
        let ok = ModelConfig {
            cube_side: 17,
            ..ModelConfig::default()
        };
        assert_eq!(ok.embed_dim(), 128);
        ok.validate().unwrap();
    }

    #[test]
    fn filter_progression_must_double() {
        let bad = ModelConfig {
            conv_filters: vec![16, 32, 48, 96],
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let three = ModelConfig {
            conv_filters: vec![16, 32, 64],
            ..ModelConfig::default()
        };
        assert!(three.validate().is_err());
        let small = ModelConfig {
            conv_filters: vec![2, 4, 8, 16],
            num_heads: 4,
            ..ModelConfig::default()
        };
        small.validate().unwrap();
    }

    #[test]
    fn heads_must_divide_width() {
        let c = ModelConfig {
            num_heads: 3,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
