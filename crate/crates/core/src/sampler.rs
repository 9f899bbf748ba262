//! Per-batch random subspace selection.
//!
//! One mask is drawn per batch and shared by every sample and every class
//! weight column of that batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::IndexSet;
use crate::rng::SeededRng;

/// Absorbs representation error in `ratio * dim` (e.g. 0.29 * 100).
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Exactly `⌊r·d⌋` dimensions, uniformly without replacement.
    #[default]
    FixedCount,
    /// Each dimension independently with probability `r`.
    Bernoulli,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed-count" | "fixed" => Ok(MaskMode::FixedCount),
            "bernoulli" => Ok(MaskMode::Bernoulli),
            other => Err(Error::config(format!("unknown mask mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::FixedCount => "fixed-count",
            MaskMode::Bernoulli => "bernoulli",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubspaceConfig {
    pub ratio: f64,
    pub mode: MaskMode,
    pub feature_dim: usize,
}

impl SubspaceConfig {
    pub fn new(ratio: f64, mode: MaskMode, feature_dim: usize) -> Result<Self> {
        let cfg = Self {
            ratio,
            mode,
            feature_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn fixed(ratio: f64, feature_dim: usize) -> Result<Self> {
        Self::new(ratio, MaskMode::FixedCount, feature_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::config(format!(
                "ratio must lie in (0, 1], got {}",
                self.ratio
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("feature_dim must be positive"));
        }
        if self.mode == MaskMode::FixedCount && self.count() == 0 {
            return Err(Error::config(format!(
                "ratio {} keeps no dimension out of {}",
                self.ratio, self.feature_dim
            )));
        }
        Ok(())
    }

    /// `⌊r·d⌋`, the fixed-count mask size.
    pub fn count(&self) -> usize {
        ((self.ratio * self.feature_dim as f64 + FLOOR_SLACK).floor() as usize).min(self.feature_dim)
    }

    pub fn is_identity(&self) -> bool {
        self.ratio >= 1.0
    }
}

/// Draws one mask. Indices are returned sorted.
pub fn sample_mask(cfg: &SubspaceConfig, rng: &mut SeededRng) -> IndexSet {
    let d = cfg.feature_dim;
    if cfg.is_identity() {
        return IndexSet::full(d);
    }
    let idx = match cfg.mode {
        MaskMode::FixedCount => rng.sample_distinct(d, cfg.count()),
        MaskMode::Bernoulli => loop {
            let picked: Vec<usize> = (0..d).filter(|_| rng.bernoulli(cfg.ratio)).collect();
            if !picked.is_empty() {
                break picked;
            }
        },
    };
    IndexSet::new(d, idx).expect("sampler produced a valid index set")
}

/// One independent mask per batch, drawn sequentially from `rng`.
pub fn mask_schedule(cfg: &SubspaceConfig, rng: &mut SeededRng, num_batches: usize) -> Vec<IndexSet> {
    (0..num_batches).map(|_| sample_mask(cfg, rng)).collect()
}
