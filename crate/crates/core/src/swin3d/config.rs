use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::ConfigError;

/// Which embeddings feed the deep feature extractor, and how they are fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Feature and volume branches, each with its own deep extractor,
    /// averaged after extraction.
    Full,
    /// Feature embedding only.
    SrFeatures,
    /// Volume embedding only.
    SrVolume,
    /// Both embeddings averaged before a single deep extractor.
    SrAvg,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::SrAvg, Variant::SrFeatures, Variant::SrVolume];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SrFeatures => "sr_features",
            Variant::SrVolume => "sr_volume",
            Variant::SrAvg => "sr_avg",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown variant {s:?}")))
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width shared by every transformer layer.
    pub c_emb: usize,
    /// Residual Swin transformer blocks per deep extractor.
    pub k_rstb: usize,
    /// Swin transformer layers per block.
    pub l_stl: usize,
    pub heads: usize,
    /// Window edge `M` in tokens.
    pub window: usize,
    /// Cubic patch edge in voxels.
    pub patch: usize,
    pub mlp_ratio: f64,
    pub variant: Variant,
    pub share_branch_weights: bool,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            c_emb: 252,
            k_rstb: 3,
            l_stl: 6,
            heads: 6,
            window: 8,
            patch: 2,
            mlp_ratio: 2.0,
            variant: Variant::Full,
            share_branch_weights: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration used by the gradient checks and the overfit
    /// runs.
    pub fn toy() -> Self {
        Self {
            c_emb: 12,
            k_rstb: 1,
            l_stl: 2,
            heads: 2,
            window: 2,
            patch: 2,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.c_emb / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.c_emb as f64 * self.mlp_ratio).round() as usize
    }

    /// Cyclic shift applied by every second layer.
    pub fn shift(&self) -> usize {
        self.window / 2
    }

    /// Every input axis must be a multiple of this.
    pub fn input_multiple(&self) -> usize {
        self.patch * self.window
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.c_emb == 0 || self.heads == 0 || self.c_emb % self.heads != 0 {
            return bad(format!("c_emb {} must be a positive multiple of heads {}", self.c_emb, self.heads));
        }
        if self.window < 2 || self.window % 2 != 0 {
            return bad(format!("window {} must be even and >= 2", self.window));
        }
        if self.patch == 0 {
            return bad("patch must be positive".into());
        }
        if self.k_rstb == 0 || self.l_stl == 0 {
            return bad("k_rstb and l_stl must be positive".into());
        }
        if !(self.mlp_ratio.is_finite() && self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return bad(format!("mlp_ratio {} must give a positive hidden width", self.mlp_ratio));
        }
        Ok(())
    }

    /// Checks that a `[H, W, D]` input fits the patch and window grid.
    pub fn check_input_dims(&self, dims: [usize; 3]) -> Result<(), ConfigError> {
        let m = self.input_multiple();
        if dims.iter().any(|&d| d == 0 || d % m != 0) {
            return Err(ConfigError::Invalid(format!(
                "input dims {dims:?} must be multiples of patch x window = {} x {} = {m} per axis",
                self.patch, self.window
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical TOML rendering, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_matches_reported_setup() {
        let c = ModelConfig::default();
        assert_eq!((c.c_emb, c.k_rstb, c.l_stl, c.heads, c.window, c.patch), (252, 3, 6, 6, 8, 2));
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 42);
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let c = ModelConfig::toy();
        let back = ModelConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        let extra = format!("{}\ndropout = 0.1\n", c.to_toml());
        assert!(matches!(ModelConfig::from_toml(&extra), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn validation_failures() {
        let mut c = ModelConfig::toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.window = 3;
        assert!(c.validate().is_err());
        let c = ModelConfig::toy();
        assert!(c.check_input_dims([8, 8, 8]).is_ok());
        let msg = c.check_input_dims([8, 6, 8]).unwrap_err().to_string();
        assert!(msg.contains("multiples"), "{msg}");
    }

    #[test]
    fn hash_tracks_fields() {
        let a = ModelConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.variant = Variant::SrAvg;
        assert_ne!(a.hash(), b.hash());
    }
}
