//! Datasets with fixed detections, mini-batches and augmentation.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoders::images_to_tensor;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::perception::{oracle_detect, CorruptionConfig, DetectionSet};
use crate::scenegen::{Relation, RgbImage, SceneRecord};
use crate::seed::derive_seed;

/// Scenes and the detections the model sees for them. Detections are drawn
/// once per image so every epoch and every evaluation sees the same input.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<SceneRecord>,
    pub detections: Vec<DetectionSet>,
}

impl Dataset {
    /// Runs the oracle detector on every record with a per-image seed
    /// derived from `seed`.
    pub fn new(records: Vec<SceneRecord>, corruption: &CorruptionConfig, seed: u64) -> Result<Self> {
        corruption.validate()?;
        if let Some(first) = records.first() {
            let size = (first.width(), first.height());
            if records.iter().any(|r| (r.width(), r.height()) != size) {
                return Err(Error::Config("dataset images differ in size".into()));
            }
        }
        let detections = records
            .iter()
            .enumerate()
            .map(|(k, r)| oracle_detect(r, corruption, derive_seed(seed, &format!("detect/{k}"))))
            .collect();
        Ok(Self { records, detections })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// `(width, height)` of the images, `None` when empty.
    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.records.first().map(|r| (r.width(), r.height()))
    }

    pub fn labels(&self) -> Vec<[u8; 3]> {
        self.records.iter().map(|r| r.cvs).collect()
    }

    /// The first `n` examples.
    pub fn truncated(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            records: self.records[..n].to_vec(),
            detections: self.detections[..n].to_vec(),
        }
    }
}

/// Photometric and geometric augmentation applied to training batches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability of a horizontal flip.
    pub flip: f64,
    /// Half-width of the additive brightness shift.
    pub brightness: f64,
    /// Half-width of the multiplicative contrast change around the mean.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            flip: 0.5,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.flip)
            && (0.0..=1.0).contains(&self.brightness)
            && (0.0..1.0).contains(&self.contrast);
        if !ok {
            return Err(Error::Config(format!("augmentation parameters out of range: {self:?}")));
        }
        Ok(())
    }
}

/// One image with its annotations and detections.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: RgbImage,
    pub gt_boxes: Vec<BBox>,
    pub gt_classes: Vec<usize>,
    pub gt_relations: Vec<Relation>,
    pub detections: DetectionSet,
    pub label: [u8; 3],
}

impl Example {
    fn from_dataset(ds: &Dataset, k: usize) -> Self {
        let r = &ds.records[k];
        Self {
            image: r.image.clone(),
            gt_boxes: r.boxes(),
            gt_classes: r.objects.iter().map(|o| o.class_id).collect(),
            gt_relations: r.relations.clone(),
            detections: ds.detections[k].clone(),
            label: r.cvs,
        }
    }

    /// Mirrors the image together with every box and mask. Relation classes
    /// are unchanged by a horizontal mirror.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.image.width as f64;
        Self {
            image: self.image.flip_horizontal(),
            gt_boxes: self.gt_boxes.iter().map(|b| b.flip_horizontal(w)).collect(),
            gt_classes: self.gt_classes.clone(),
            gt_relations: self.gt_relations.clone(),
            detections: self.detections.flip_horizontal(self.image.width),
            label: self.label,
        }
    }

    fn augment(mut self, cfg: &AugmentConfig, rng: &mut ChaCha8Rng) -> Self {
        if rng.random_bool(cfg.flip) {
            self = self.flip_horizontal();
        }
        let shift = if cfg.brightness > 0.0 { rng.random_range(-cfg.brightness..cfg.brightness) } else { 0.0 };
        let gain = if cfg.contrast > 0.0 {
            rng.random_range(1.0 - cfg.contrast..1.0 + cfg.contrast)
        } else {
            1.0
        };
        let mean = self.image.data.iter().map(|&v| v as f64).sum::<f64>() / self.image.data.len().max(1) as f64;
        for v in &mut self.image.data {
            *v = ((*v as f64 - mean) * gain + mean + shift).clamp(0.0, 1.0) as f32;
        }
        self
    }
}

/// A mini-batch of examples.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<Example>,
    /// Seed for any per-batch randomness inside the model.
    pub seed: u64,
}

impl Batch {
    /// Examples `indices` of `ds`, augmented when `augment` is given.
    pub fn new(ds: &Dataset, indices: &[usize], augment: Option<&AugmentConfig>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let examples = indices
            .iter()
            .map(|&k| {
                let ex = Example::from_dataset(ds, k);
                match augment {
                    Some(cfg) if cfg.enabled => ex.augment(cfg, &mut rng),
                    _ => ex,
                }
            })
            .collect();
        Self { examples, seed }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.examples
            .first()
            .map_or((0, 0), |e| (e.image.width, e.image.height))
    }

    pub fn images(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let refs: Vec<&RgbImage> = self.examples.iter().map(|e| &e.image).collect();
        images_to_tensor(&refs, dtype, device)
    }

    pub fn detections(&self) -> Vec<DetectionSet> {
        self.examples.iter().map(|e| e.detections.clone()).collect()
    }

    pub fn labels(&self) -> Vec<[u8; 3]> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// `(B, 3)` label tensor.
    pub fn label_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let flat: Vec<f32> = self.examples.iter().flat_map(|e| e.label.map(f32::from)).collect();
        Ok(Tensor::from_vec(flat, (self.len(), 3), device)?.to_dtype(dtype)?)
    }
}

/// Visiting order of an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("order/{epoch}")));
    order.shuffle(&mut rng);
    order
}

/// Consecutive index chunks of at most `batch_size`.
pub fn chunks(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}
