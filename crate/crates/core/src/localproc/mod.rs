//! Pseudolabel generation: multi-scale adaptive thresholding, morphological
//! refinement and locally anomalous instance removal.

pub mod lair;
pub mod morph;
pub mod threshold;

use serde::{Deserialize, Serialize};

pub use lair::{lair_filter, LairConfig};
pub use morph::{morph_refine, split_concave, MorphConfig};
pub use threshold::{
    adaptive_threshold, detect_bimodal, threshold_multiscale, BimodalCriteria, BimodalFit,
    ThresholdConfig, ThresholdMode, ThresholdResult,
};

use crate::components::connected_components;
use crate::raster::{InstanceMask, RgbTile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalConfig {
    pub threshold: ThresholdConfig,
    pub morph: MorphConfig,
    pub lair: LairConfig,
    pub morph_enabled: bool,
    pub lair_enabled: bool,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            threshold: ThresholdConfig::default(),
            morph: MorphConfig::default(),
            lair: LairConfig::default(),
            morph_enabled: true,
            lair_enabled: true,
        }
    }
}

/// Pseudolabel from a hematoxylin image and the HSI tile used for instance
/// descriptors.
pub fn pseudolabel(h_image: &RgbTile, hsi: &RgbTile, cfg: &LocalConfig) -> InstanceMask {
    let binary = threshold_multiscale(h_image, &cfg.threshold);
    let mask = if cfg.morph_enabled {
        morph_refine(&binary, &cfg.morph)
    } else {
        connected_components(&binary)
    };
    if cfg.lair_enabled {
        lair_filter(&mask, hsi, &cfg.lair).relabel_sequential()
    } else {
        mask
    }
}
