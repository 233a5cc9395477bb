//! Flat training / model configuration with TOML round-trip and the
//! ablation switches.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::GridSpec;
use crate::error::{Error, Result};
use crate::pcd::{MaskMode, PcdSpec};

/// Number of personalized renderer layers: query, key, value, feed-forward.
pub const TARGET_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptMode {
    /// Sigmoid fusion of the interpolated volume code and projected point
    /// feature.
    #[default]
    Fused,
    /// Factor fixed at 0: every point uses the candidate weights.
    Disabled,
    /// Factor fixed at 1: every point uses the personalization codes.
    AllOnes,
    /// Factor regressed from the point feature alone.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Rays per step.
    pub rays: usize,
    /// Samples per ray.
    pub samples: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Residual weight in F_x = f_x + alpha (f_I + f_V).
    pub alpha: f64,
    /// Weight of the latent reconstruction loss. Some figure captions swap
    /// alpha and gamma; the defaults follow the implementation section.
    pub gamma: f64,
    pub diversity_weight: f64,
    pub log_every: usize,
    /// Renderer width d.
    pub width: usize,
    pub grid_x: usize,
    pub grid_y: usize,
    pub depth_planes: usize,
    pub channels: usize,
    pub rank: usize,
    pub adaptiveness: AdaptMode,
    pub probabilistic: bool,
    pub mask: MaskMode,
    /// Keep f_x in F_x.
    pub residual: bool,
    /// Keep f_I in F_x.
    pub invariance: bool,
    /// Rays per inference chunk.
    pub chunk: usize,
    /// Support views whose colours at each point's projection are fed to
    /// the renderer; 0 turns the colour input off.
    pub source_views: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            iterations: 2000,
            rays: 128,
            samples: 16,
            learning_rate: 5e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.3,
            gamma: 1.0,
            diversity_weight: 1e-5,
            log_every: 50,
            width: 16,
            grid_x: 32,
            grid_y: 32,
            depth_planes: 8,
            channels: 16,
            rank: 8,
            adaptiveness: AdaptMode::Fused,
            probabilistic: true,
            mask: MaskMode::Quantized,
            residual: true,
            invariance: true,
            chunk: 256,
            source_views: 5,
        }
    }
}

pub const ABLATION_TRIALS: [u32; 8] = [1, 2, 5, 6, 7, 8, 9, 10];

/// Default config with one ablation switch flipped.
pub fn ablation(trial: u32) -> Result<TrainConfig> {
    let mut c = TrainConfig::default();
    match trial {
        1 => {
            c.adaptiveness = AdaptMode::Disabled;
            c.diversity_weight = 0.0;
        }
        2 => c.probabilistic = false,
        5 => c.adaptiveness = AdaptMode::AllOnes,
        6 => c.mask = MaskMode::AllZeros,
        7 => c.mask = MaskMode::Soft,
        8 => c.diversity_weight = 0.0,
        9 => c.residual = false,
        10 => c.invariance = false,
        _ => {
            return Err(Error::invalid(format!(
                "unknown ablation trial {trial}; expected one of {ABLATION_TRIALS:?}"
            )))
        }
    }
    Ok(c)
}

impl TrainConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec {
            x: self.grid_x,
            y: self.grid_y,
            depth_planes: self.depth_planes,
            channels: self.channels,
            layers: TARGET_LAYERS,
        }
    }

    pub fn pcd(&self) -> PcdSpec {
        let mut spec = PcdSpec::uniform(TARGET_LAYERS, self.width);
        spec.rank = self.rank;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("learning_rate", self.learning_rate),
            ("alpha", self.alpha),
            ("gamma", self.gamma),
            ("diversity_weight", self.diversity_weight),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if self.rays < 2 || self.samples < 2 {
            return Err(Error::invalid(format!(
                "need rays >= 2 and samples >= 2, got {} and {}",
                self.rays, self.samples
            )));
        }
        if self.width == 0 || self.rank == 0 || self.chunk == 0 || self.log_every == 0 {
            return Err(Error::invalid("width, rank, chunk and log_every must be positive"));
        }
        self.grid().validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            message: e.to_string(),
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?, &path.display().to_string())
    }

    /// SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}
