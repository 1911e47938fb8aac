//! Training objectives.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::perception::Backbone;

/// Backbone depths compared by the perceptual term.
pub const PERCEPTUAL_LEVELS: [usize; 2] = [0, 1];

const SSIM_TAPS: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// `log(1 + exp(x))` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = ((x.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok((pos + tail)?)
}

/// Mean binary cross-entropy of logits against `{0, 1}` targets of the same
/// shape.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = (targets * softplus(&logits.neg()?)?)?;
    let neg = ((1.0 - targets)? * softplus(logits)?)?;
    Ok((pos + neg)?.mean_all()?)
}

/// Binary cross-entropy over `(B, 3)` logits with the positive term of
/// criterion `c` scaled by `pos_weights[c]`.
pub fn weighted_bce(logits: &Tensor, targets: &Tensor, pos_weights: &[f64; 3]) -> Result<Tensor> {
    let w = Tensor::from_slice(pos_weights, (1, 3), logits.device())?.to_dtype(logits.dtype())?;
    let pos = (targets * softplus(&logits.neg()?)?)?.broadcast_mul(&w)?;
    let neg = ((1.0 - targets)? * softplus(logits)?)?;
    Ok((pos + neg)?.mean_all()?)
}

/// Mean cross-entropy of `(n, K)` logits against class indices.
pub fn cross_entropy(logits: &Tensor, classes: &[usize]) -> Result<Tensor> {
    let n = logits.dims2()?.0;
    if n != classes.len() {
        return Err(Error::Shape(format!("{n} rows for {} targets", classes.len())));
    }
    let t: Vec<u32> = classes.iter().map(|&c| c as u32).collect();
    let t = Tensor::from_vec(t, n, logits.device())?;
    Ok(candle_nn::loss::cross_entropy(logits, &t)?)
}

/// Positive-term weights `(1 - f) / f` from training-split positive rates.
pub fn inverse_freq_weights(labels: &[[u8; 3]]) -> Result<[f64; 3]> {
    if labels.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let mut w = [0.0; 3];
    for c in 0..3 {
        let f = labels.iter().filter(|l| l[c] == 1).count() as f64 / labels.len() as f64;
        if f == 0.0 {
            return Err(Error::DegenerateCriterion(c + 1));
        }
        w[c] = (1.0 - f) / f;
    }
    Ok(w)
}

/// Normalised Gaussian window.
fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_TAPS / 2) as f64;
    let g: Vec<f64> = (0..SSIM_TAPS)
        .map(|k| (-((k as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// `(n - taps + 1, n)` matrix applying the window at every valid offset.
fn band_matrix(n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let g = gaussian_window();
    let m = n + 1 - SSIM_TAPS;
    let mut data = vec![0.0; m * n];
    for r in 0..m {
        data[r * n + r..r * n + r + SSIM_TAPS].copy_from_slice(&g);
    }
    Ok(Tensor::from_vec(data, (m, n), dev)?.to_dtype(dtype)?)
}

/// Valid-region Gaussian filtering of a `(B, H, W, C)` map; the output is
/// laid out `(B, H', C, W')`, which is all a spatial mean needs.
fn blur(x: &Tensor, gh: &Tensor, gw_t: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let hp = gh.dims()[0];
    let rows = gh.broadcast_matmul(&x.reshape((b, h, w * c))?)?;
    let cols = rows
        .reshape((b, hp, w, c))?
        .transpose(2, 3)?
        .contiguous()?
        .reshape((b * hp * c, w))?
        .matmul(gw_t)?;
    Ok(cols.reshape((b, hp, c, gw_t.dims()[1]))?)
}

/// Mean SSIM of `(B, H, W, C)` images in `[0, 1]` with an 11-tap Gaussian
/// window (sigma 1.5) over the valid region.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (_, h, w, _) = a.dims4()?;
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("ssim of {:?} and {:?}", a.dims(), b.dims())));
    }
    if h < SSIM_TAPS || w < SSIM_TAPS {
        return Err(Error::Shape(format!("ssim needs sides of at least {SSIM_TAPS}")));
    }
    let gh = band_matrix(h, a.dtype(), a.device())?;
    let gw_t = band_matrix(w, a.dtype(), a.device())?.t()?.contiguous()?;
    let f = |x: &Tensor| blur(x, &gh, &gw_t);
    let mu_a = f(a)?;
    let mu_b = f(b)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (f(&a.sqr()?)? - &mu_aa)?;
    let var_b = (f(&b.sqr()?)? - &mu_bb)?;
    let cov = (f(&(a * b)?)? - &mu_ab)?;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let num = (((mu_ab * 2.0)? + c1)? * ((cov * 2.0)? + c2)?)?;
    let den = (((mu_aa + mu_bb)? + c1)? * ((var_a + var_b)? + c2)?)?;
    Ok((num / den)?.mean_all()?)
}

/// Terms of the reconstruction objective.
#[derive(Debug, Clone)]
pub struct ReconLoss {
    pub total: Tensor,
    pub l1: Tensor,
    pub perceptual: Tensor,
    pub ssim: Tensor,
}

/// L1 + perceptual + (1 - SSIM) between a target and a reconstruction.
/// The perceptual term compares activations of `features` (a frozen
/// backbone) at [`PERCEPTUAL_LEVELS`]; without a backbone it is zero.
pub fn recon_loss(target: &Tensor, recon: &Tensor, features: Option<&Backbone>) -> Result<ReconLoss> {
    if target.dims() != recon.dims() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} differs from target {:?}",
            recon.dims(),
            target.dims()
        )));
    }
    let target = target.detach();
    let l1 = (recon - &target)?.abs()?.mean_all()?;
    let perceptual = match features {
        Some(net) => {
            let ft = net.forward_levels(&target)?;
            let fr = net.forward_levels(recon)?;
            let mut acc = Tensor::zeros((), recon.dtype(), recon.device())?;
            for &l in &PERCEPTUAL_LEVELS {
                acc = (acc + (&fr[l] - ft[l].detach())?.abs()?.mean_all()?)?;
            }
            acc
        }
        None => Tensor::zeros((), recon.dtype(), recon.device())?,
    };
    let s = (1.0 - ssim(&target, recon)?)?;
    let total = ((&l1 + &perceptual)? + &s)?;
    Ok(ReconLoss {
        total,
        l1,
        perceptual,
        ssim: s,
    })
}

/// Scalar value of a 0-d tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
