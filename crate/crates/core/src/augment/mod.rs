//! Two-view augmentation and group-masked corruption.

mod mask;
mod views;

use serde::{Deserialize, Serialize};

use crate::error::{AsitError, Result};

pub use mask::{
    apply_corruption, corrupt_with_mode, derive_token_mask, sample_block_mask, BlockMask, CorruptionMode,
    CorruptionRecord, Rect,
};
pub use views::{crop_and_resize, make_views, ViewPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Shortest crop as a fraction of the clip.
    pub crop_min: f64,
    pub crop_max: f64,
    /// When false no pixel is corrupted and the reconstruction target covers
    /// the whole spectrogram.
    pub corruption: bool,
    /// Coverage in zero-fill mode.
    pub corruption_ratio: f64,
    /// Coverage in alien-block mode.
    pub alien_ratio: f64,
    /// Probability of choosing alien mode over zero-fill.
    pub alien_prob: f64,
    pub align_masks: bool,
    pub mask_block_min: usize,
    pub mask_block_max: usize,
    pub coverage_tolerance: f64,
    /// Corrupt only the first view of each pair.
    pub single_view: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_min: 0.6,
            crop_max: 1.0,
            corruption: true,
            corruption_ratio: 0.7,
            alien_ratio: 0.3,
            alien_prob: 0.5,
            align_masks: false,
            mask_block_min: 8,
            mask_block_max: 48,
            coverage_tolerance: 0.02,
            single_view: false,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.crop_min && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(AsitError::config("augment.crop_min", "need 0 < crop_min <= crop_max <= 1"));
        }
        for (key, r) in [
            ("augment.corruption_ratio", self.corruption_ratio),
            ("augment.alien_ratio", self.alien_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(AsitError::config(key, format!("ratio must lie in [0, 1), got {r}")));
            }
        }
        if !(0.0..=1.0).contains(&self.alien_prob) {
            return Err(AsitError::config("augment.alien_prob", "must lie in [0, 1]"));
        }
        if self.mask_block_min == 0 || self.mask_block_min > self.mask_block_max {
            return Err(AsitError::config(
                "augment.mask_block_min",
                "need 1 <= mask_block_min <= mask_block_max",
            ));
        }
        if !(self.coverage_tolerance > 0.0 && self.coverage_tolerance < 0.5) {
            return Err(AsitError::config("augment.coverage_tolerance", "must lie in (0, 0.5)"));
        }
        Ok(())
    }
}
