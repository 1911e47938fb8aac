//! Small channels-last building blocks shared by the networks.
//!
//! Feature maps are `(batch, height, width, channels)`. Strided
//! convolutions use 2x2 kernels with stride 2, which reduce to a
//! space-to-depth reshape followed by a dense projection.

use candle_core::{DType, Device, Module, Result, Shape, Tensor, Var, D};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{linear, linear_no_bias, Init, Linear, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::seed::derive_seed;

/// Two-layer perceptron with a ReLU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    first: Linear,
    second: Linear,
}

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            first: linear(input, hidden, vb.pp("0"))?,
            second: linear(hidden, output, vb.pp("1"))?,
        })
    }
}

impl Module for Mlp {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.second.forward(&self.first.forward(xs)?.relu()?)
    }
}

/// Layer normalisation over `(H, W, C)` of each sample with a per-channel
/// affine transform.
#[derive(Debug, Clone)]
pub struct MapNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl MapNorm {
    pub fn new(channels: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            gamma: vb.get_with_hints(channels, "weight", candle_nn::Init::Const(1.0))?,
            beta: vb.get_with_hints(channels, "bias", candle_nn::Init::Const(0.0))?,
        })
    }
}

impl Module for MapNorm {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = xs.dims4()?;
        let flat = xs.reshape((b, h * w * c))?;
        let mean = flat.mean_keepdim(1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, h, w, c))?;
        normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

/// Parameter-free per-sample, per-channel normalisation over space.
pub fn instance_norm(xs: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = xs.dims4()?;
    let flat = xs.reshape((b, h * w, c))?;
    let mean = flat.mean_keepdim(1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?.reshape((b, h, w, c))
}

/// `(B, H, W, C)` to `(B, H/2, W/2, 4C)`.
pub fn space_to_depth(xs: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = xs.dims4()?;
    xs.reshape((b, h / 2, 2, w / 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / 2, w / 2, 4 * c))
}

/// `(B, H, W, 4C)` to `(B, 2H, 2W, C)`; inverse of [`space_to_depth`].
pub fn depth_to_space(xs: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = xs.dims4()?;
    let c = c4 / 4;
    xs.reshape((b, h, w, 2, 2, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, 2 * h, 2 * w, c))
}

/// Average pooling by an integer factor (power of two).
pub fn avg_pool(xs: &Tensor, factor: usize) -> Result<Tensor> {
    let mut x = xs.clone();
    let mut f = factor;
    while f > 1 {
        let (b, h, w, c) = x.dims4()?;
        x = x.reshape((b, h / 2, 2, w / 2, 2, c))?.mean(4)?.mean(2)?;
        f /= 2;
    }
    Ok(x)
}

/// 2x2 stride-2 convolution.
#[derive(Debug, Clone)]
pub struct PatchConv {
    proj: Linear,
}

impl PatchConv {
    pub fn new(input: usize, output: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: linear(4 * input, output, vb)?,
        })
    }
}

impl Module for PatchConv {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        self.proj.forward(&space_to_depth(xs)?)
    }
}

/// 2x2 stride-2 transposed convolution.
#[derive(Debug, Clone)]
pub struct PatchUpConv {
    proj: Linear,
}

impl PatchUpConv {
    pub fn new(input: usize, output: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: linear(input, 4 * output, vb)?,
        })
    }
}

impl Module for PatchUpConv {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        depth_to_space(&self.proj.forward(xs)?)
    }
}

/// 3x3 stride-1 convolution with zero padding on a channels-last map.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    conv: candle_nn::Conv2d,
}

impl Conv3x3 {
    pub fn new(input: usize, output: usize, vb: VarBuilder) -> Result<Self> {
        let cfg = candle_nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            conv: candle_nn::conv2d(input, output, 3, cfg, vb)?,
        })
    }
}

impl Module for Conv3x3 {
    fn forward(&self, xs: &Tensor) -> Result<Tensor> {
        let nchw = xs.permute((0, 3, 1, 2))?;
        self.conv.forward(&nchw)?.permute((0, 2, 3, 1))
    }
}

/// Linear map without bias, exposed for factorised projections.
pub fn projection(input: usize, output: usize, vb: VarBuilder) -> Result<Linear> {
    linear_no_bias(input, output, vb)
}

/// Row-wise softmax over the last dimension.
pub fn softmax_last(xs: &Tensor) -> Result<Tensor> {
    candle_nn::ops::softmax(xs, D::Minus1)
}

/// `f64` values as a tensor of the requested dtype.
pub fn tensor_from_f64(values: &[f64], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Tensor::from_slice(values, shape, device)?.to_dtype(dtype)
}

/// `f32` values as a tensor of the requested dtype.
pub fn tensor_from_f32(values: &[f32], shape: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Tensor::from_slice(values, shape, device)?.to_dtype(dtype)
}

/// Variable store that initialises every new variable from a stream seeded
/// by `(seed, variable name)`, so initial weights are reproducible and do not
/// depend on construction order.
struct SeededStore {
    vars: VarMap,
    seed: u64,
}

fn seeded_init(init: Init, shape: &Shape, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let normal = |rng: &mut ChaCha8Rng, mean: f64, std: f64| -> Vec<f64> {
        let d = Normal::new(mean, std).expect("finite standard deviation");
        (0..n).map(|_| d.sample(rng)).collect()
    };
    let uniform = |rng: &mut ChaCha8Rng, lo: f64, up: f64| -> Vec<f64> {
        (0..n).map(|_| lo + (up - lo) * rng.random::<f64>()).collect()
    };
    match init {
        Init::Const(v) => vec![v; n],
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Randn { mean, stdev } => normal(rng, mean, stdev),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let std = non_linearity.gain() / (fan.for_shape(shape) as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
                NormalOrUniform::Normal => normal(rng, 0.0, std),
            }
        }
    }
}

impl SimpleBackend for SeededStore {
    fn get(&self, s: Shape, name: &str, h: Init, dtype: DType, dev: &Device) -> Result<Tensor> {
        let mut data = self.vars.data().lock().expect("variable map lock");
        if let Some(v) = data.get(name) {
            if v.shape() != &s {
                candle_core::bail!("shape mismatch on {name}: {s:?} <> {:?}", v.shape());
            }
            return Ok(v.as_tensor().clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, name));
        let values = seeded_init(h, &s, &mut rng);
        let var = Var::from_tensor(&Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?)?;
        let t = var.as_tensor().clone();
        data.insert(name.to_string(), var);
        Ok(t)
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> Result<Tensor> {
        candle_core::bail!("variable {name} must be created with a shape")
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.vars.data().lock().expect("variable map lock").contains_key(name)
    }
}

/// Builder over `vars` whose new variables are initialised reproducibly from
/// `seed`.
pub fn seeded_var_builder(vars: &VarMap, seed: u64, dtype: DType, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_backend(
        Box::new(SeededStore {
            vars: vars.clone(),
            seed,
        }),
        dtype,
        device.clone(),
    )
}

#[cfg(test)]
mod tests {
    #[test]
    fn seeded_builder_is_reproducible() {
        let make = |seed| {
            let vm = VarMap::new();
            let vb = seeded_var_builder(&vm, seed, DType::F32, &Device::Cpu);
            let l = linear(6, 4, vb.pp("lin")).unwrap();
            let n = MapNorm::new(3, vb.pp("norm")).unwrap();
            (l.weight().flatten_all().unwrap().to_vec1::<f32>().unwrap(), n.gamma.to_vec1::<f32>().unwrap())
        };
        assert_eq!(make(1), make(1));
        assert_ne!(make(1).0, make(2).0);
        assert_eq!(make(1).1, vec![1.0; 3]);
        let vm = VarMap::new();
        let l = linear(6, 4, seeded_var_builder(&vm, 3, DType::F32, &Device::Cpu)).unwrap();
        let bound = 1.0 / 6f32.sqrt();
        let b = l.bias().unwrap().to_vec1::<f32>().unwrap();
        assert!(b.iter().all(|v| v.abs() <= bound));
    }

    use super::*;

    #[test]
    fn space_depth_round_trip() {
        let x = Tensor::arange(0f32, 2.0 * 4.0 * 6.0 * 3.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 4, 6, 3))
            .unwrap();
        let y = depth_to_space(&space_to_depth(&x).unwrap()).unwrap();
        let d = (x - y).unwrap().abs().unwrap().max_all().unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn avg_pool_matches_manual() {
        let x = Tensor::arange(0f32, 16.0, &Device::Cpu).unwrap().reshape((1, 4, 4, 1)).unwrap();
        let p = avg_pool(&x, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(p, vec![2.5, 4.5, 10.5, 12.5]);
    }
}
