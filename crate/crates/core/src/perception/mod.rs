//! Visual front-end: convolutional backbone, region pooling and an oracle
//! detector.

mod backbone;
mod detector;
mod roi;

pub use backbone::{Backbone, BackboneConfig, FeatureMap, BACKBONE_STRIDE};
pub use detector::{
    oracle_detect, oracle_detect_capped, permuted, smoothed_class_probs, CorruptionConfig, Detection, DetectionSet,
    MAX_DETECTIONS,
};
pub use roi::{pool_region, pool_regions, region_weights, DEFAULT_POOL_GRID};
