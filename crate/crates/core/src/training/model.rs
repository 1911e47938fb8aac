//! The full latent-graph criteria model and its two training objectives.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{linear, Linear, VarBuilder, VarMap};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, restore_vars, save_checkpoint, CheckpointMeta};
use super::data::Batch;
use super::losses::{bce_with_logits, cross_entropy, recon_loss, scalar, weighted_bce};
use super::perturb::{edge_union_boxes, perturb_boxes};
use crate::decoders::{
    backgroundize, build_layout, build_mask_layout, images_to_tensor, layouts_to_tensor, BoxOverride, CvsDecoder,
    CvsDecoderConfig, Layout, ReconInput, Reconstructor, ReconstructorConfig,
};
use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::latentgraph::{edge_boxes_per_graph, match_edges_to_gt, EncoderConfig, EncoderOutput, LatentGraphEncoder};
use crate::perception::{Backbone, BackboneConfig, FeatureMap, MAX_DETECTIONS};
use crate::scenegen::RgbImage;
use crate::nn::seeded_var_builder;
use crate::seed::derive_seed;

/// Variables of the stage-1 feature extractor, frozen in stage 2.
pub const DETECTOR_PREFIX: &str = "backbone.";
/// Trainable copy of the feature extractor used in stage 2.
pub const LG_BACKBONE_PREFIX: &str = "lg_backbone.";
pub const ENCODER_PREFIX: &str = "encoder.";
pub const CVS_PREFIX: &str = "cvs.";
pub const RECON_PREFIX: &str = "recon.";

/// Occupancy source of the reconstruction layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayoutSource {
    Boxes,
    /// Detection masks where available, boxes otherwise.
    Masks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Backbone output size; must equal the encoder and decoder feature size.
    pub features: usize,
    pub encoder: EncoderConfig,
    pub cvs: CvsDecoderConfig,
    /// Node feature bottleneck before the reconstructor.
    pub recon_bottleneck: usize,
    pub layout: LayoutSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_width: 64,
            image_height: 64,
            features: 64,
            encoder: EncoderConfig::default(),
            cvs: CvsDecoderConfig::default(),
            recon_bottleneck: 64,
            layout: LayoutSource::Boxes,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cvs.components.validate()?;
        if self.encoder.features != self.features || self.cvs.features != self.features {
            return Err(Error::Config(format!(
                "feature sizes disagree: model {}, encoder {}, decoder {}",
                self.features, self.encoder.features, self.cvs.features
            )));
        }
        if self.image_width % 8 != 0 || self.image_height % 8 != 0 || self.image_width < 16 || self.image_height < 16 {
            return Err(Error::Config(format!(
                "image size {}x{} must be at least 16 and divisible by 8",
                self.image_width, self.image_height
            )));
        }
        if self.recon_bottleneck == 0 {
            return Err(Error::Config("reconstruction bottleneck must be positive".into()));
        }
        Ok(())
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.image_width, self.image_height)
    }
}

/// Objective settings shared by the stage-1 step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Weights {
    pub relpn: f64,
    pub edge: f64,
    /// Whether the edge classification term is used at all.
    pub edge_loss: bool,
}

/// Objective settings of the stage-2 step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Settings {
    pub pos_weights: [f64; 3],
    pub lambda_perturb: f64,
    pub reconstruction: bool,
    pub recon_weight: f64,
}

#[derive(Debug, Clone)]
pub struct Stage1Loss {
    pub total: Tensor,
    pub relpn: f64,
    pub edge: f64,
    pub edges: usize,
}

#[derive(Debug, Clone)]
pub struct Stage2Loss {
    pub total: Tensor,
    pub cvs: f64,
    /// `(total, l1, perceptual, 1 - ssim)` of the reconstruction term.
    pub recon: Option<[f64; 4]>,
    pub logits: Tensor,
}

/// Feature extractor, latent graph encoder, criteria decoder and
/// reconstruction branch in one variable map.
pub struct LgCvsModel {
    config: ModelConfig,
    vars: VarMap,
    dtype: DType,
    device: Device,
    stage: u8,
    detector_backbone: Backbone,
    lg_backbone: Backbone,
    encoder: LatentGraphEncoder,
    cvs: CvsDecoder,
    recon_bottleneck: Linear,
    reconstructor: Reconstructor,
    /// Stage-1 extractor over detached weights, so losses computed through
    /// it leave no gradient on the frozen variables.
    frozen: Option<Backbone>,
}

impl LgCvsModel {
    /// Freshly initialised model in stage 1. Initial weights depend only on
    /// `seed`.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let vars = VarMap::new();
        let vb = seeded_var_builder(&vars, seed, dtype, device);
        let bcfg = BackboneConfig {
            image_width: config.image_width,
            image_height: config.image_height,
            features: config.features,
        };
        let detector_backbone = Backbone::new(bcfg, vb.pp("backbone"))?;
        let lg_backbone = Backbone::new(bcfg, vb.pp("lg_backbone"))?;
        let encoder = LatentGraphEncoder::new(config.encoder.clone(), vb.pp("encoder"))?;
        let cvs = CvsDecoder::new(config.cvs.clone(), vb.pp("cvs"))?;
        let recon_bottleneck = linear(config.features, config.recon_bottleneck, vb.pp("recon.bottleneck"))?;
        let reconstructor = Reconstructor::new(
            ReconstructorConfig::new(MAX_DETECTIONS, config.recon_bottleneck),
            vb.pp("recon.decoder"),
        )?;
        Ok(Self {
            config,
            vars,
            dtype,
            device: device.clone(),
            stage: 1,
            detector_backbone,
            lg_backbone,
            encoder,
            cvs,
            recon_bottleneck,
            reconstructor,
            frozen: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    pub fn stage(&self) -> u8 {
        self.stage
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Stage-1 feature extractor (the perceptual-loss network in stage 2).
    pub fn detector_backbone(&self) -> &Backbone {
        self.frozen.as_ref().unwrap_or(&self.detector_backbone)
    }

    /// Switches to stage 2: the trainable feature extractor starts as a copy
    /// of the stage-1 one.
    pub fn begin_stage2(&mut self) -> Result<()> {
        if self.stage == 2 {
            return Ok(());
        }
        let data = self.vars.data().lock().expect("variable map lock");
        for (name, var) in data.iter() {
            if let Some(rest) = name.strip_prefix(DETECTOR_PREFIX) {
                let target = data
                    .get(&format!("{LG_BACKBONE_PREFIX}{rest}"))
                    .ok_or_else(|| Error::Checkpoint(format!("no trainable copy of {name}")))?;
                target.set(&var.as_tensor().copy()?)?;
            }
        }
        drop(data);
        self.stage = 2;
        self.freeze_detector()
    }

    fn freeze_detector(&mut self) -> Result<()> {
        let data = self.vars.data().lock().expect("variable map lock");
        let detached: HashMap<String, Tensor> = data
            .iter()
            .filter_map(|(n, v)| n.strip_prefix(DETECTOR_PREFIX).map(|rest| (rest.to_string(), v.as_tensor().detach())))
            .collect();
        drop(data);
        let vb = VarBuilder::from_tensors(detached, self.dtype, &self.device);
        self.frozen = Some(Backbone::new(self.detector_backbone.config(), vb)?);
        Ok(())
    }

    /// Variables under any of `prefixes`, in name order.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        let data = self.vars.data().lock().expect("variable map lock");
        let mut named: Vec<(&String, &Var)> = data
            .iter()
            .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .collect();
        named.sort_by(|a, b| a.0.cmp(b.0));
        named.into_iter().map(|(_, v)| v.clone()).collect()
    }

    /// Variables updated by stage 1.
    pub fn stage1_vars(&self) -> Vec<Var> {
        self.vars_with_prefixes(&[DETECTOR_PREFIX, ENCODER_PREFIX])
    }

    /// Variables updated by stage 2; never includes [`DETECTOR_PREFIX`].
    pub fn stage2_vars(&self, reconstruction: bool) -> Vec<Var> {
        if reconstruction {
            self.vars_with_prefixes(&[LG_BACKBONE_PREFIX, ENCODER_PREFIX, CVS_PREFIX, RECON_PREFIX])
        } else {
            self.vars_with_prefixes(&[LG_BACKBONE_PREFIX, ENCODER_PREFIX, CVS_PREFIX])
        }
    }

    /// Snapshot of the named tensors, for freeze checks.
    pub fn tensors_with_prefix(&self, prefix: &str) -> Result<HashMap<String, Vec<f32>>> {
        let data = self.vars.data().lock().expect("variable map lock");
        let mut out = HashMap::new();
        for (name, var) in data.iter().filter(|(n, _)| n.starts_with(prefix)) {
            out.insert(name.clone(), var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?);
        }
        Ok(out)
    }

    fn feature_backbone(&self) -> &Backbone {
        if self.stage == 1 {
            &self.detector_backbone
        } else {
            &self.lg_backbone
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        if batch.image_size() != self.config.image_size() {
            return Err(Error::Config(format!(
                "images are {:?} but the model expects {:?}",
                batch.image_size(),
                self.config.image_size()
            )));
        }
        Ok(())
    }

    /// Image tensor, feature map and latent graph of a batch.
    pub fn encode(&self, batch: &Batch) -> Result<(Tensor, FeatureMap, EncoderOutput)> {
        self.check_batch(batch)?;
        let images = batch.images(self.dtype, &self.device)?;
        let fm = self.feature_backbone().features(&images)?;
        let out = self.encoder.forward(
            &fm,
            &batch.detections(),
            self.config.image_size(),
            derive_seed(batch.seed, "edges"),
        )?;
        Ok((images, fm, out))
    }

    /// Relation proposal and edge classification losses. `None` when the
    /// batch has no edges at all.
    pub fn stage1_loss(&self, batch: &Batch, w: &Stage1Weights) -> Result<Option<Stage1Loss>> {
        let (_, _, out) = self.encode(batch)?;
        let graph = &out.graph;
        let m = graph.edges.len();
        if m == 0 {
            return Ok(None);
        }
        let mut presence = vec![0f32; m];
        let mut classes = vec![0usize; m];
        for (g, edges) in edge_boxes_per_graph(graph).iter().enumerate() {
            let ex = &batch.examples[g];
            let boxes: Vec<BBox> = edges.iter().map(|e| e.1).collect();
            for ((e, _), (p, c)) in edges.iter().zip(match_edges_to_gt(&boxes, &ex.gt_relations, &ex.gt_boxes)) {
                presence[*e] = p as f32;
                classes[*e] = c;
            }
        }
        let zero = Tensor::zeros((), self.dtype, &self.device)?;
        let relpn = match &out.edge_scores {
            Some(s) => {
                let y = Tensor::from_vec(presence, m, &self.device)?.to_dtype(self.dtype)?;
                bce_with_logits(s, &y)?
            }
            None => zero.clone(),
        };
        let edge = if w.edge_loss {
            cross_entropy(&graph.edge_logits, &classes)?
        } else {
            zero
        };
        let total = ((&relpn * w.relpn)? + (&edge * w.edge)?)?;
        Ok(Some(Stage1Loss {
            relpn: scalar(&relpn)?,
            edge: scalar(&edge)?,
            total,
            edges: m,
        }))
    }

    /// Node-per-channel layouts of the batch graph, zero-padded to
    /// [`MAX_DETECTIONS`] channels.
    fn node_layouts(&self, batch: &Batch, boxes: &[BBox], ranges: &[std::ops::Range<usize>]) -> Result<Vec<Layout>> {
        let (w, h) = self.config.image_size();
        ranges
            .iter()
            .enumerate()
            .map(|(g, r)| match self.config.layout {
                LayoutSource::Boxes => build_layout(&boxes[r.clone()], w, h, MAX_DETECTIONS),
                LayoutSource::Masks => {
                    let masks: Vec<BinaryMask> = batch.examples[g]
                        .detections
                        .items
                        .iter()
                        .zip(&boxes[r.clone()])
                        .map(|(d, b)| d.mask.clone().unwrap_or_else(|| BinaryMask::from_box(w, h, b)))
                        .collect();
                    build_mask_layout(&masks, w, h, MAX_DETECTIONS)
                }
            })
            .collect()
    }

    /// Reconstruction of the batch images from the latent graph node
    /// features, node layouts and backgroundised images.
    pub fn reconstruct(&self, batch: &Batch, out: &EncoderOutput) -> Result<Tensor> {
        let nodes = &out.graph.nodes;
        let ranges = nodes.graph_ranges();
        let b = batch.len();
        let layouts = self.node_layouts(batch, &nodes.boxes, &ranges)?;
        let layout = layouts_to_tensor(&layouts, self.dtype, &self.device)?;
        let backgrounds: Vec<RgbImage> = batch
            .examples
            .iter()
            .enumerate()
            .map(|(g, ex)| {
                backgroundize(
                    &ex.image,
                    &nodes.boxes[ranges[g].clone()],
                    derive_seed(batch.seed, &format!("background/{g}")),
                )
            })
            .collect();
        let refs: Vec<&RgbImage> = backgrounds.iter().collect();
        let background = images_to_tensor(&refs, self.dtype, &self.device)?;
        let fr = self.config.recon_bottleneck;
        let padded = if nodes.is_empty() {
            Tensor::zeros((b, MAX_DETECTIONS, fr), self.dtype, &self.device)?
        } else {
            // Scatter matrix from stacked nodes to padded slots.
            let n = nodes.len();
            let mut scatter = vec![0f32; b * MAX_DETECTIONS * n];
            for (g, r) in ranges.iter().enumerate() {
                for (slot, k) in r.clone().enumerate() {
                    scatter[(g * MAX_DETECTIONS + slot) * n + k] = 1.0;
                }
            }
            let scatter = Tensor::from_vec(scatter, (b * MAX_DETECTIONS, n), &self.device)?.to_dtype(self.dtype)?;
            let code = self.recon_bottleneck.forward(&nodes.features)?;
            scatter.matmul(&code)?.reshape((b, MAX_DETECTIONS, fr))?
        };
        self.reconstructor.forward(&ReconInput {
            layout: layout.clone(),
            carrier: layout,
            carrier_features: padded,
            background,
        })
    }

    /// Criteria logits of an encoded batch; node boxes are jittered when
    /// `lambda_perturb > 0`.
    pub fn classify(&self, batch: &Batch, out: &EncoderOutput, lambda_perturb: f64) -> Result<Tensor> {
        let graph = &out.graph;
        if lambda_perturb > 0.0 {
            let nodes = perturb_boxes(
                &graph.nodes.boxes,
                lambda_perturb,
                self.config.image_size(),
                derive_seed(batch.seed, "perturb"),
            );
            let edges = edge_union_boxes(&nodes, &graph.edges.pairs);
            self.cvs.forward(
                graph,
                Some(BoxOverride {
                    nodes: &nodes,
                    edges: &edges,
                }),
            )
        } else {
            self.cvs.forward(graph, None)
        }
    }

    /// Weighted criteria loss plus, when enabled, the reconstruction loss.
    /// Box perturbation is applied only here, never in [`Self::predict`].
    pub fn stage2_loss(&self, batch: &Batch, s: &Stage2Settings) -> Result<Stage2Loss> {
        let (images, _, out) = self.encode(batch)?;
        let logits = self.classify(batch, &out, s.lambda_perturb)?;
        let labels = batch.label_tensor(self.dtype, &self.device)?;
        let cvs = weighted_bce(&logits, &labels, &s.pos_weights)?;
        let mut total = cvs.clone();
        let mut recon = None;
        if s.reconstruction {
            let rec = self.reconstruct(batch, &out)?;
            let rl = recon_loss(&images, &rec, Some(self.detector_backbone()))?;
            total = (total + (&rl.total * s.recon_weight)?)?;
            recon = Some([
                scalar(&rl.total)?,
                scalar(&rl.l1)?,
                scalar(&rl.perceptual)?,
                scalar(&rl.ssim)?,
            ]);
        }
        Ok(Stage2Loss {
            total,
            cvs: scalar(&cvs)?,
            recon,
            logits,
        })
    }

    /// Perturbation-free criteria logits and the latent graph of a batch.
    pub fn predict(&self, batch: &Batch) -> Result<(Tensor, EncoderOutput)> {
        let (_, _, out) = self.encode(batch)?;
        let logits = self.classify(batch, &out, 0.0)?;
        Ok((logits, out))
    }

    pub fn save(&self, path: &Path, epoch: usize, metric: f64, metric_name: &str, run: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            stage: self.stage,
            epoch,
            metric,
            metric_name: metric_name.to_string(),
            config: serde_json::json!({ "model": self.config, "run": run }),
        };
        save_checkpoint(&self.vars, &meta, path)
    }

    /// Model rebuilt from a checkpoint, in the stage it was saved in.
    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let (tensors, meta) = load_checkpoint(path, device)?;
        let config: ModelConfig = serde_json::from_value(
            meta.config
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("{} holds no model configuration", path.display())))?,
        )
        .map_err(|e| Error::Checkpoint(format!("model configuration: {e}")))?;
        if meta.stage != 1 && meta.stage != 2 {
            return Err(Error::Checkpoint(format!("{} is not a latent graph model", path.display())));
        }
        let mut model = Self::new(config, 0, dtype, device)?;
        restore_vars(&model.vars, &tensors, &[""])?;
        model.stage = meta.stage;
        if model.stage == 2 {
            model.freeze_detector()?;
        }
        Ok((model, meta))
    }
}
