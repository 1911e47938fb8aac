use candle_core::{Module, Result as TResult, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv3x3, MapNorm, PatchConv};

/// Stride between image pixels and feature cells.
pub const BACKBONE_STRIDE: usize = 8;

/// Channels-last feature map `(B, H', W', F)` with its image stride.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tensor: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn batch(&self) -> usize {
        self.tensor.dims()[0]
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = self.tensor.dims();
        (d[1], d[2])
    }

    pub fn channels(&self) -> usize {
        self.tensor.dims()[3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Output feature dimension.
    pub features: usize,
}

/// Four conv/norm/ReLU blocks: three 2x2 stride-2 blocks (16, 32, F
/// channels) and one 3x3 stride-1 block (F channels).
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    convs: [PatchConv; 3],
    norms: [MapNorm; 4],
    last: Conv3x3,
}

impl Backbone {
    pub fn new(config: BackboneConfig, vb: VarBuilder) -> TResult<Self> {
        let f = config.features;
        Ok(Self {
            config,
            convs: [
                PatchConv::new(3, 16, vb.pp("block0.conv"))?,
                PatchConv::new(16, 32, vb.pp("block1.conv"))?,
                PatchConv::new(32, f, vb.pp("block2.conv"))?,
            ],
            norms: [
                MapNorm::new(16, vb.pp("block0.norm"))?,
                MapNorm::new(32, vb.pp("block1.norm"))?,
                MapNorm::new(f, vb.pp("block2.norm"))?,
                MapNorm::new(f, vb.pp("block3.norm"))?,
            ],
            last: Conv3x3::new(f, f, vb.pp("block3.conv"))?,
        })
    }

    pub fn config(&self) -> BackboneConfig {
        self.config
    }

    fn check(&self, images: &Tensor) -> Result<()> {
        let d = images.dims();
        if d.len() != 4 || d[1] != self.config.image_height || d[2] != self.config.image_width || d[3] != 3 {
            return Err(Error::Shape(format!(
                "backbone expects (B, {}, {}, 3) images, got {:?}",
                self.config.image_height, self.config.image_width, d
            )));
        }
        Ok(())
    }

    /// Activations after each of the four blocks.
    pub fn forward_levels(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.check(images)?;
        let mut x = (images - 0.5)?;
        let mut levels = Vec::with_capacity(4);
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            x = norm.forward(&conv.forward(&x)?)?.relu()?;
            levels.push(x.clone());
        }
        x = self.norms[3].forward(&self.last.forward(&x)?)?.relu()?;
        levels.push(x);
        Ok(levels)
    }

    /// Feature map of a `(B, H, W, 3)` image batch with values in `[0, 1]`.
    pub fn features(&self, images: &Tensor) -> Result<FeatureMap> {
        let tensor = self.forward_levels(images)?.pop().expect("four levels");
        Ok(FeatureMap {
            tensor,
            stride: BACKBONE_STRIDE,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn backbone(size: usize, dtype: DType) -> (VarMap, Backbone) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, dtype, &Device::Cpu);
        let cfg = BackboneConfig {
            image_width: size,
            image_height: size,
            features: 64,
        };
        let b = Backbone::new(cfg, vb).unwrap();
        (vm, b)
    }

    #[test]
    fn shape_and_determinism() {
        let (_vm, b) = backbone(128, DType::F32);
        let x = Tensor::rand(0f32, 1f32, (2, 128, 128, 3), &Device::Cpu).unwrap();
        let fm = b.features(&x).unwrap();
        assert_eq!(fm.tensor.dims(), &[2, 16, 16, 64]);
        let again = b.features(&x).unwrap();
        let diff = (fm.tensor - again.tensor).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(diff.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let (_vm, b) = backbone(64, DType::F32);
        let x = Tensor::zeros((1, 32, 64, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(b.features(&x), Err(Error::Shape(_))));
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let (_vm, b) = backbone(16, DType::F64);
        let dev = Device::Cpu;
        let x0 = Tensor::rand(0f64, 1f64, (1, 16, 16, 3), &dev).unwrap();
        let readout = Tensor::rand(-1f64, 1f64, (1, 2, 2, 64), &dev).unwrap();
        let f = |x: &Tensor| -> f64 {
            let fm = b.features(x).unwrap();
            (fm.tensor * &readout).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let xv = candle_core::Var::from_tensor(&x0).unwrap();
        let fm = b.features(xv.as_tensor()).unwrap();
        let grads = (fm.tensor * &readout).unwrap().sum_all().unwrap().backward().unwrap();
        let g = grads.get(xv.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x0.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-5;
        for &k in &[0usize, 37, 200, 511, 767] {
            let mut plus = base.clone();
            plus[k] += eps;
            let mut minus = base.clone();
            minus[k] -= eps;
            let tp = Tensor::from_vec(plus, (1, 16, 16, 3), &dev).unwrap();
            let tm = Tensor::from_vec(minus, (1, 16, 16, 3), &dev).unwrap();
            let fd = (f(&tp) - f(&tm)) / (2.0 * eps);
            let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-8);
            assert!(rel < 1e-3, "k={k} fd={fd} analytic={}", g[k]);
        }
    }
}
