//! Layout-conditioned image decoder with spatially adaptive normalisation.
//!
//! The conditioning stack is `[L, L_feat, I_bg]` with `L_feat = L * H`
//! (per-pixel sum of node features). Its first use is a per-pixel linear map,
//! so the stack never has to be materialised: `L_feat W = L (H W)`. Average
//! pooling also commutes with that map, which lets every resolution level
//! project a pooled layout instead of resizing full-resolution maps.

use candle_core::{Module, Result as TResult, Tensor, D};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{avg_pool, instance_norm, PatchConv, PatchUpConv};

/// Number of resolution levels (full resolution plus three halvings).
const LEVELS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructorConfig {
    /// Channels of the occupancy part of the stack.
    pub layout_channels: usize,
    /// Size of the features spread over the carrier (the bottleneck size).
    pub feature_dim: usize,
    /// Width of the per-level conditioning maps.
    pub cond_hidden: usize,
    /// Decoder channels at full, 1/2, 1/4 and 1/8 resolution.
    pub channels: [usize; LEVELS],
}

impl ReconstructorConfig {
    pub fn new(layout_channels: usize, feature_dim: usize) -> Self {
        Self {
            layout_channels,
            feature_dim,
            cond_hidden: 16,
            channels: [8, 16, 32, 32],
        }
    }
}

#[derive(Debug, Clone)]
struct CondProjection {
    layout: Tensor,
    features: Tensor,
    image: Tensor,
    bias: Tensor,
}

impl CondProjection {
    fn new(cfg: &ReconstructorConfig, vb: VarBuilder) -> TResult<Self> {
        let k = cfg.cond_hidden;
        let init = |fan_in: usize| Init::Randn {
            mean: 0.0,
            stdev: 1.0 / (fan_in as f64).sqrt(),
        };
        let stack = cfg.layout_channels + cfg.feature_dim + 3;
        Ok(Self {
            layout: vb.get_with_hints((cfg.layout_channels, k), "layout", init(stack))?,
            features: vb.get_with_hints((cfg.feature_dim, k), "features", init(stack))?,
            image: vb.get_with_hints((3, k), "image", init(stack))?,
            bias: vb.get_with_hints(k, "bias", Init::Const(0.0))?,
        })
    }
}

/// 1x1 projection of a `(B, H, W, C)` map by a `(C, K)` matrix.
fn project(x: &Tensor, w: &Tensor) -> TResult<Tensor> {
    let (b, h, wd, c) = x.dims4()?;
    x.reshape((b * h * wd, c))?.matmul(w)?.reshape((b, h, wd, w.dims()[1]))
}

/// The map followed by its successive 2x average poolings.
fn pyramid(x: &Tensor) -> TResult<Vec<Tensor>> {
    let mut levels = vec![x.clone()];
    for _ in 1..LEVELS {
        let next = avg_pool(levels.last().expect("non-empty"), 2)?;
        levels.push(next);
    }
    Ok(levels)
}

/// Per-image `(B, H, W, N) x (B, N, K)` product.
fn spread(carrier: &Tensor, per_image: &Tensor) -> TResult<Tensor> {
    let (b, h, w, n) = carrier.dims4()?;
    let k = per_image.dims()[2];
    carrier.reshape((b, h * w, n))?.matmul(per_image)?.reshape((b, h, w, k))
}

#[derive(Debug, Clone)]
struct Modulation {
    gamma: candle_nn::Linear,
    beta: candle_nn::Linear,
}

impl Modulation {
    fn new(cond: usize, channels: usize, vb: VarBuilder) -> TResult<Self> {
        Ok(Self {
            gamma: candle_nn::linear(cond, channels, vb.pp("gamma"))?,
            beta: candle_nn::linear(cond, channels, vb.pp("beta"))?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> TResult<Tensor> {
        let normed = instance_norm(x)?;
        let scale = (self.gamma.forward(cond)? + 1.0)?;
        (normed * scale)? + self.beta.forward(cond)?
    }
}

/// Conditioning inputs of the decoder.
#[derive(Debug, Clone)]
pub struct ReconInput {
    /// `(B, H, W, layout_channels)` occupancy.
    pub layout: Tensor,
    /// `(B, H, W, N)` maps that carry feature vectors to pixels.
    pub carrier: Tensor,
    /// `(B, N, feature_dim)` vectors spread by `carrier`.
    pub carrier_features: Tensor,
    /// `(B, H, W, 3)` backgroundised image.
    pub background: Tensor,
}

#[derive(Debug, Clone)]
pub struct Reconstructor {
    config: ReconstructorConfig,
    cond: Vec<CondProjection>,
    down: Vec<PatchConv>,
    up: Vec<PatchUpConv>,
    modulation: Vec<Modulation>,
    out: candle_nn::Linear,
}

impl Reconstructor {
    pub fn new(config: ReconstructorConfig, vb: VarBuilder) -> TResult<Self> {
        let c = config.channels;
        let k = config.cond_hidden;
        let cond = (0..LEVELS)
            .map(|l| CondProjection::new(&config, vb.pp(format!("cond{l}"))))
            .collect::<TResult<Vec<_>>>()?;
        let down = vec![
            PatchConv::new(k, c[1], vb.pp("down0"))?,
            PatchConv::new(c[1], c[2], vb.pp("down1"))?,
            PatchConv::new(c[2], c[3], vb.pp("down2"))?,
        ];
        let up = vec![
            PatchUpConv::new(c[3], c[2], vb.pp("up0"))?,
            PatchUpConv::new(c[2], c[1], vb.pp("up1"))?,
            PatchUpConv::new(c[1], c[0], vb.pp("up2"))?,
        ];
        let modulation = vec![
            Modulation::new(k, c[2], vb.pp("mod0"))?,
            Modulation::new(k, c[1], vb.pp("mod1"))?,
            Modulation::new(k, c[0], vb.pp("mod2"))?,
        ];
        Ok(Self {
            config,
            cond,
            down,
            up,
            modulation,
            out: candle_nn::linear(c[0], 3, vb.pp("out"))?,
        })
    }

    pub fn config(&self) -> &ReconstructorConfig {
        &self.config
    }

    fn check(&self, input: &ReconInput) -> Result<()> {
        let (b, h, w, lc) = input.layout.dims4()?;
        let (cb, ch, cw, n) = input.carrier.dims4()?;
        let (fb, fnodes, fd) = input.carrier_features.dims3()?;
        let bg = input.background.dims4()?;
        let ok = lc == self.config.layout_channels
            && (cb, ch, cw) == (b, h, w)
            && (fb, fnodes, fd) == (b, n, self.config.feature_dim)
            && bg == (b, h, w, 3)
            && h % 8 == 0
            && w % 8 == 0;
        if !ok {
            return Err(Error::Shape(format!(
                "reconstructor inputs: layout {:?}, carrier {:?}, features {:?}, background {:?}",
                input.layout.dims(),
                input.carrier.dims(),
                input.carrier_features.dims(),
                input.background.dims()
            )));
        }
        Ok(())
    }

    /// Conditioning maps at the four levels, computed in factored form.
    fn conditioning(&self, input: &ReconInput) -> Result<Vec<Tensor>> {
        let layout = pyramid(&input.layout)?;
        // The model passes one tensor as both layout and carrier.
        let carrier = if input.carrier.id() == input.layout.id() {
            layout.clone()
        } else {
            pyramid(&input.carrier)?
        };
        let bg = pyramid(&input.background)?;
        let mut maps = Vec::with_capacity(LEVELS);
        for (l, p) in self.cond.iter().enumerate() {
            let node_proj = input.carrier_features.broadcast_matmul(&p.features)?;
            let m = ((project(&layout[l], &p.layout)? + spread(&carrier[l], &node_proj)?)? + project(&bg[l], &p.image)?)?
                .broadcast_add(&p.bias)?;
            maps.push(m.relu()?);
        }
        Ok(maps)
    }

    /// Conditioning maps from an explicit `[L, L_feat, I_bg]` stack.
    fn conditioning_from_stack(&self, stack: &Tensor) -> Result<Vec<Tensor>> {
        let mut maps = Vec::with_capacity(LEVELS);
        for (l, p) in self.cond.iter().enumerate() {
            let w = Tensor::cat(&[&p.layout, &p.features, &p.image], 0)?;
            let pooled = avg_pool(stack, 1 << l)?;
            maps.push(project(&pooled, &w)?.broadcast_add(&p.bias)?.relu()?);
        }
        Ok(maps)
    }

    fn decode(&self, cond: &[Tensor]) -> Result<Tensor> {
        let mut x = cond[0].clone();
        for d in &self.down {
            x = d.forward(&x)?.relu()?;
        }
        for (k, (u, m)) in self.up.iter().zip(&self.modulation).enumerate() {
            x = m.forward(&u.forward(&x)?, &cond[LEVELS - 2 - k])?.relu()?;
        }
        Ok(candle_nn::ops::sigmoid(&self.out.forward(&x)?)?)
    }

    /// Reconstructed `(B, H, W, 3)` image in `[0, 1]`.
    pub fn forward(&self, input: &ReconInput) -> Result<Tensor> {
        self.check(input)?;
        self.decode(&self.conditioning(input)?)
    }

    /// Same decoder fed an explicit `(B, H, W, layout + feature + 3)` stack.
    pub fn forward_stack(&self, stack: &Tensor) -> Result<Tensor> {
        let c = stack.dims4()?.3;
        let expected = self.config.layout_channels + self.config.feature_dim + 3;
        if c != expected {
            return Err(Error::Shape(format!("stack has {c} channels, expected {expected}")));
        }
        self.decode(&self.conditioning_from_stack(stack)?)
    }
}

/// `[L, L_feat, I_bg]` along channels.
pub fn conditioning_stack(layout: &Tensor, feature_layout: &Tensor, background: &Tensor) -> Result<Tensor> {
    Ok(Tensor::cat(&[layout, feature_layout, background], D::Minus1)?)
}
