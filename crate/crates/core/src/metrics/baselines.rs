//! Layout-only and image-plus-layout convolutional criteria classifiers.

use candle_core::{Module, Result as TResult, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::decoders::{build_class_layout, Layout, ReconInput, Reconstructor, ReconstructorConfig, NUM_CRITERIA};
use crate::error::{Error, Result};
use crate::nn::{Conv3x3, MapNorm, PatchConv};
use crate::perception::DetectionSet;
use crate::scenegen::NUM_CLASSES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    /// Class layout only.
    Layout,
    /// Image concatenated with the class layout.
    Deep,
}

impl BaselineKind {
    pub fn input_channels(self) -> usize {
        match self {
            BaselineKind::Layout => NUM_CLASSES,
            BaselineKind::Deep => 3 + NUM_CLASSES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub kind: BaselineKind,
    pub width: usize,
    /// Channels of the three stride-2 blocks; the last block keeps the third.
    pub channels: [usize; 3],
    /// Image feature bottleneck for the reconstruction variant, `None` when
    /// reconstruction is off.
    pub recon_bottleneck: Option<usize>,
}

impl BaselineConfig {
    pub fn new(kind: BaselineKind) -> Self {
        Self {
            kind,
            width: 64,
            channels: [32, 64, 64],
            recon_bottleneck: None,
        }
    }
}

/// Class layout of a detection set, one channel per object class.
pub fn layoutcvs_input(dets: &DetectionSet, width: usize, height: usize) -> Result<Layout> {
    let classes: Vec<usize> = dets.items.iter().map(|d| d.class_id).collect();
    build_class_layout(&dets.boxes(), &classes, width, height, NUM_CLASSES)
}

/// `(B, H, W, 3 + C)` image and class-layout stack.
pub fn deepcvs_input(images: &Tensor, layouts: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[images, layouts], D::Minus1)?)
}

/// Reconstruction head of the image-plus-layout baseline: the pooled image
/// feature is bottlenecked to one vector and spread over the foreground.
#[derive(Debug, Clone)]
pub struct DeepCvsReconstruction {
    bottleneck: Linear,
    decoder: Reconstructor,
}

impl DeepCvsReconstruction {
    fn new(features: usize, size: usize, vb: VarBuilder) -> TResult<Self> {
        Ok(Self {
            bottleneck: linear(features, size, vb.pp("bottleneck"))?,
            decoder: Reconstructor::new(ReconstructorConfig::new(NUM_CLASSES, size), vb.pp("decoder"))?,
        })
    }

    /// Reconstructed image from the pooled feature `(B, F)`, the class layout
    /// `(B, H, W, C)` and the backgroundised image.
    pub fn forward(&self, pooled: &Tensor, layout: &Tensor, background: &Tensor) -> Result<Tensor> {
        let fg = layout.max_keepdim(D::Minus1)?;
        let code = self.bottleneck.forward(pooled)?.unsqueeze(1)?;
        self.decoder.forward(&ReconInput {
            layout: layout.clone(),
            carrier: fg,
            carrier_features: code,
            background: background.clone(),
        })
    }
}

/// Three stride-2 blocks, one 3x3 block, global average pooling and a linear
/// head.
#[derive(Debug, Clone)]
pub struct BaselineClassifier {
    config: BaselineConfig,
    convs: [PatchConv; 3],
    norms: [MapNorm; 4],
    last: Conv3x3,
    head: Linear,
    recon: Option<DeepCvsReconstruction>,
}

/// Output of a baseline forward pass.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    pub logits: Tensor,
    pub pooled: Tensor,
}

impl BaselineClassifier {
    pub fn new(config: BaselineConfig, vb: VarBuilder) -> Result<Self> {
        if config.recon_bottleneck.is_some() && config.kind != BaselineKind::Deep {
            return Err(Error::Config("only the image baseline has a reconstruction variant".into()));
        }
        let [c0, c1, c2] = config.channels;
        let cin = config.kind.input_channels();
        let recon = match config.recon_bottleneck {
            Some(s) => Some(DeepCvsReconstruction::new(c2, s, vb.pp("recon"))?),
            None => None,
        };
        Ok(Self {
            convs: [
                PatchConv::new(cin, c0, vb.pp("block0.conv"))?,
                PatchConv::new(c0, c1, vb.pp("block1.conv"))?,
                PatchConv::new(c1, c2, vb.pp("block2.conv"))?,
            ],
            norms: [
                MapNorm::new(c0, vb.pp("block0.norm"))?,
                MapNorm::new(c1, vb.pp("block1.norm"))?,
                MapNorm::new(c2, vb.pp("block2.norm"))?,
                MapNorm::new(c2, vb.pp("block3.norm"))?,
            ],
            last: Conv3x3::new(c2, c2, vb.pp("block3.conv"))?,
            head: linear(c2, NUM_CRITERIA, vb.pp("head"))?,
            recon,
            config,
        })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn reconstruction(&self) -> Option<&DeepCvsReconstruction> {
        self.recon.as_ref()
    }

    /// Criteria logits `(B, 3)` and the pooled feature `(B, F)` of a
    /// `(B, H, W, channels)` input.
    pub fn forward(&self, input: &Tensor) -> Result<BaselineOutput> {
        let (_, h, w, c) = input.dims4()?;
        if c != self.config.kind.input_channels() || h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!(
                "baseline expects {} channels and sides divisible by 8, got {:?}",
                self.config.kind.input_channels(),
                input.dims()
            )));
        }
        let mut x = input.clone();
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = norm.forward(&conv.forward(&x)?)?.relu()?;
        }
        x = self.norms[3].forward(&self.last.forward(&x)?)?.relu()?;
        let pooled = x.mean(2)?.mean(1)?;
        Ok(BaselineOutput {
            logits: self.head.forward(&pooled)?,
            pooled,
        })
    }
}
