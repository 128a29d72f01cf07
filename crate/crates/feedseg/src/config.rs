//! Run configuration: the single flat key-value schema shared by the CLI,
//! the training engine and the checkpoint format. Parsed from TOML; unknown
//! keys are rejected.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Encoder family. The pyramid transformer is the reference encoder; the
/// tiny strided-conv variant satisfies the same pyramid contract at a
/// fraction of the cost.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    #[serde(rename = "tiny-conv")]
    TinyConv,
    #[serde(rename = "pyramid-transformer")]
    PyramidTransformer,
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EncoderVariant::TinyConv => write!(f, "tiny-conv"),
            EncoderVariant::PyramidTransformer => write!(f, "pyramid-transformer"),
        }
    }
}

/// Normalized run configuration. All fields have defaults; `validate`
/// enforces the cross-field invariants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Square input resolution; must be divisible by 32.
    pub image_size: usize,
    pub encoder_variant: EncoderVariant,
    /// Channels of the four pyramid stages, strictly increasing.
    pub encoder_channels: [usize; 4],
    /// Transformer blocks per stage (pyramid-transformer only).
    pub encoder_depths: [usize; 4],
    /// Attention heads per stage (pyramid-transformer only).
    pub encoder_heads: [usize; 4],
    /// Spatial-reduction ratios per stage (pyramid-transformer only).
    pub encoder_sr_ratios: [usize; 4],
    /// Feed-forward expansion inside transformer blocks.
    pub mlp_ratio: usize,
    /// Width of the dilated fusion trunk.
    pub fed_channels: usize,
    /// Width of the decoder blocks; 0 means "same as fed_channels".
    pub decoder_channels: usize,
    /// Prompt embedding dimension.
    pub embed_dim: usize,
    /// Weight of the auxiliary attribute loss.
    pub lambda_attr: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping: stop after this many epochs without val improvement.
    pub patience: usize,
    /// Multiply the learning rate by this factor on a plateau.
    pub plateau_factor: f64,
    /// Epochs without improvement before the learning rate is reduced.
    pub plateau_patience: usize,
    /// Test-time mask refinement iterations.
    pub refine_iterations: usize,
    pub seed: u64,
    /// Per-component area fraction below which a polyp counts as small.
    pub t_small: f64,
    /// Per-component area fraction at or above which a polyp counts as large.
    pub t_large: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            image_size: 256,
            encoder_variant: EncoderVariant::PyramidTransformer,
            encoder_channels: [64, 128, 320, 512],
            encoder_depths: [2, 2, 2, 2],
            encoder_heads: [1, 2, 5, 8],
            encoder_sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
            fed_channels: 128,
            decoder_channels: 0,
            embed_dim: 64,
            lambda_attr: 1.0,
            learning_rate: 1e-4,
            batch_size: 16,
            max_epochs: 200,
            patience: 15,
            plateau_factor: 0.1,
            plateau_patience: 5,
            refine_iterations: 3,
            seed: 42,
            t_small: 0.02,
            t_large: 0.12,
        }
    }
}

impl RunConfig {
    /// Parse a TOML config; missing keys take defaults, unknown keys error.
    /// The result is validated and normalized.
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parse: {e}")))?;
        cfg.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Check every invariant and fill derived defaults.
    pub fn validate(mut self) -> Result<RunConfig> {
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        if self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 32",
                self.image_size
            )));
        }
        let c = &self.encoder_channels;
        if !(c[0] < c[1] && c[1] < c[2] && c[2] < c[3]) {
            return Err(Error::Config(format!(
                "encoder_channels must be strictly increasing, got {c:?}"
            )));
        }
        if c[0] == 0 {
            return Err(Error::Config("encoder_channels must be positive".into()));
        }
        for (ch, heads) in self.encoder_channels.iter().zip(self.encoder_heads.iter()) {
            if *heads == 0 || ch % heads != 0 {
                return Err(Error::Config(format!(
                    "heads {heads} must divide stage channels {ch}"
                )));
            }
        }
        if self.encoder_depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("encoder_depths must be positive".into()));
        }
        if self.encoder_sr_ratios.iter().any(|&r| r == 0) {
            return Err(Error::Config("encoder_sr_ratios must be positive".into()));
        }
        // stage i sits at stride 4*2^(i-1); its spatial size must be divisible
        // by the stage's reduction ratio
        for (i, &sr) in self.encoder_sr_ratios.iter().enumerate() {
            let stage_size = self.image_size / (4 << i);
            if stage_size == 0 || stage_size % sr != 0 {
                return Err(Error::Config(format!(
                    "sr ratio {sr} does not divide stage {} size {stage_size}",
                    i + 1
                )));
            }
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.fed_channels == 0 {
            return Err(Error::Config("fed_channels must be positive".into()));
        }
        if self.decoder_channels == 0 {
            self.decoder_channels = self.fed_channels;
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.refine_iterations == 0 {
            return Err(Error::Config("refine_iterations must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must be in (0, 1)".into()));
        }
        if self.lambda_attr < 0.0 {
            return Err(Error::Config("lambda_attr must be >= 0".into()));
        }
        if !(0.0 < self.t_small && self.t_small < self.t_large && self.t_large < 1.0) {
            return Err(Error::Config(format!(
                "size threshold order violated: need 0 < t_small < t_large < 1, got {} and {}",
                self.t_small, self.t_large
            )));
        }
        Ok(self)
    }

    /// Spatial size of pyramid stage `i` (1-based) for this resolution.
    pub fn stage_size(&self, i: usize) -> usize {
        assert!((1..=4).contains(&i));
        self.image_size / (4 << (i - 1))
    }

    pub fn sha256_hex(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg.image_size, 256);
        assert_eq!(cfg.refine_iterations, 3);
        assert_eq!(cfg.learning_rate, 1e-4);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.encoder_channels, [64, 128, 320, 512]);
        assert_eq!(cfg.decoder_channels, 128); // derived from fed_channels
    }

    #[test]
    fn rejects_indivisible_image_size() {
        let err = RunConfig::from_toml("image_size = 100").unwrap_err();
        assert!(err.to_string().contains("not divisible by 32"), "{err}");
    }

    #[test]
    fn rejects_threshold_order_violation() {
        let err = RunConfig::from_toml("t_small = 0.2\nt_large = 0.1").unwrap_err();
        assert!(err.to_string().contains("threshold order"), "{err}");
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_toml("not_a_key = 1").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::from_toml("image_size = 64\nfed_channels = 32").unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn pyramid_arithmetic_is_exact() {
        for s in [64usize, 128, 256] {
            let cfg = RunConfig::from_toml(&format!("image_size = {s}")).unwrap();
            assert_eq!(cfg.stage_size(1), s / 4);
            assert_eq!(cfg.stage_size(2), s / 8);
            assert_eq!(cfg.stage_size(3), s / 16);
            assert_eq!(cfg.stage_size(4), s / 32);
        }
    }

    #[test]
    fn rejects_nonpositive_rates() {
        assert!(RunConfig::from_toml("learning_rate = 0.0").is_err());
        assert!(RunConfig::from_toml("batch_size = 0").is_err());
        assert!(RunConfig::from_toml("refine_iterations = 0").is_err());
    }

    #[test]
    fn rejects_non_increasing_channels() {
        assert!(RunConfig::from_toml("encoder_channels = [64, 64, 320, 512]").is_err());
    }
}
