//! Ground-truth detector with a configurable corruption model.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::scenegen::{SceneRecord, NUM_CLASSES};

/// Maximum number of detections kept per image.
pub const MAX_DETECTIONS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionConfig {
    /// Probability of deleting each object.
    pub p_drop: f64,
    /// Box noise: each coordinate moves by `U(-jitter, jitter)` times the
    /// box width (x) or height (y).
    pub jitter: f64,
    /// Probability of reporting a different foreground class.
    pub p_confuse: f64,
    /// Probability of adding one false detection.
    pub p_spurious: f64,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            p_drop: 0.0,
            jitter: 0.0,
            p_confuse: 0.0,
            p_spurious: 0.0,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("p_drop", self.p_drop),
            ("jitter", self.jitter),
            ("p_confuse", self.p_confuse),
            ("p_spurious", self.p_spurious),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("corruption {name} = {v} is outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    /// Reported class (argmax of `class_probs`).
    pub class_id: usize,
    pub class_probs: Vec<f64>,
    pub mask: Option<BinaryMask>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub items: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.items.iter().map(|d| d.bbox).collect()
    }

    /// Mirror boxes and masks about the vertical axis of an image of `width`.
    pub fn flip_horizontal(&self, width: usize) -> Self {
        Self {
            items: self
                .items
                .iter()
                .map(|d| Detection {
                    bbox: d.bbox.flip_horizontal(width as f64),
                    mask: d.mask.as_ref().map(BinaryMask::flip_horizontal),
                    ..d.clone()
                })
                .collect(),
        }
    }
}

/// Class distribution putting `1 - p_confuse` on `class_id` and spreading the
/// rest evenly over the other foreground classes.
pub fn smoothed_class_probs(class_id: usize, p_confuse: f64) -> Vec<f64> {
    let others = (NUM_CLASSES - 2) as f64;
    (0..NUM_CLASSES)
        .map(|c| {
            if c == class_id {
                1.0 - p_confuse
            } else if c == 0 {
                0.0
            } else {
                p_confuse / others
            }
        })
        .collect()
}

/// Detections derived from ground truth with corruption applied, capped at
/// [`MAX_DETECTIONS`].
pub fn oracle_detect(record: &SceneRecord, corruption: &CorruptionConfig, seed: u64) -> DetectionSet {
    oracle_detect_capped(record, corruption, seed, MAX_DETECTIONS)
}

pub fn oracle_detect_capped(record: &SceneRecord, c: &CorruptionConfig, seed: u64, cap: usize) -> DetectionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (record.width() as f64, record.height() as f64);
    let mut items = Vec::new();
    for obj in &record.objects {
        // Draw every variate regardless of outcome so one object's fate does
        // not shift the random stream of the next.
        let drop = rng.random::<f64>() < c.p_drop;
        let confuse = rng.random::<f64>() < c.p_confuse;
        let alt = rng.random_range(1..NUM_CLASSES - 1);
        let noise: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0));
        let score_u: f64 = rng.random();
        if drop {
            continue;
        }
        let class_id = if confuse {
            // Uniform over the foreground classes other than the true one.
            if alt >= obj.class_id {
                alt + 1
            } else {
                alt
            }
        } else {
            obj.class_id
        };
        let b = obj.bbox;
        let (jx, jy) = (c.jitter * b.width(), c.jitter * b.height());
        let bbox = if c.jitter > 0.0 {
            BBox::from_corners(
                b.x1 + noise[0] * jx,
                b.y1 + noise[1] * jy,
                b.x2 + noise[2] * jx,
                b.y2 + noise[3] * jy,
            )
            .clip(w, h)
        } else {
            b
        };
        let corrupted = confuse || c.jitter > 0.0;
        items.push(Detection {
            bbox,
            class_id,
            class_probs: smoothed_class_probs(class_id, c.p_confuse),
            mask: Some(obj.mask.clone()),
            score: if corrupted { 0.5 + 0.5 * score_u } else { 1.0 },
        });
    }
    if rng.random::<f64>() < c.p_spurious {
        let bw = rng.random_range(0.1..0.3) * w;
        let bh = rng.random_range(0.1..0.3) * h;
        let x = rng.random_range(0.0..w - bw);
        let y = rng.random_range(0.0..h - bh);
        let class_id = rng.random_range(1..NUM_CLASSES);
        items.push(Detection {
            bbox: BBox::from_corners(x, y, x + bw, y + bh),
            class_id,
            class_probs: smoothed_class_probs(class_id, c.p_confuse),
            mask: None,
            score: rng.random_range(0.05..0.5),
        });
    }
    items.sort_by(|a, b| b.score.total_cmp(&a.score));
    items.truncate(cap);
    DetectionSet { items }
}

/// Detections shuffled by a permutation; used to check order equivariance.
pub fn permuted(det: &DetectionSet, seed: u64) -> (DetectionSet, Vec<usize>) {
    let mut perm: Vec<usize> = (0..det.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let items = perm.iter().map(|&k| det.items[k].clone()).collect();
    (DetectionSet { items }, perm)
}
