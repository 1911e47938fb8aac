//! Region pooling by bilinear sampling.
//!
//! Each region is turned into a row of sampling weights over the flattened
//! feature grid, so pooling many regions is a single sparse-in-spirit
//! matrix product and gradients flow to the feature map through the same
//! product.

use candle_core::Tensor;

use crate::error::{Error, Result};
use crate::geometry::BBox;

use super::FeatureMap;

/// Default number of bins per side.
pub const DEFAULT_POOL_GRID: usize = 7;

fn bilinear_taps(u: f64, n: usize) -> [(usize, f64); 2] {
    let u = u.clamp(0.0, (n - 1) as f64);
    let lo = u.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let t = u - lo as f64;
    [(lo, 1.0 - t), (hi, t)]
}

/// Continuous sample positions (in cell units) along one axis of a box.
fn axis_samples(lo: f64, hi: f64, stride: f64, grid: usize) -> Vec<f64> {
    let extent = (hi - lo) / stride;
    let bin = extent / grid as f64;
    let per_bin = (bin.ceil() as usize).max(1);
    let step = bin / per_bin as f64;
    let start = lo / stride - 0.5;
    let mut out = Vec::with_capacity(grid * per_bin);
    for g in 0..grid {
        for s in 0..per_bin {
            out.push(start + g as f64 * bin + (s as f64 + 0.5) * step);
        }
    }
    out
}

/// Sampling weights of one box over an `h x w` grid, row-major, summing to 1.
///
/// The box is clipped to the image first. Cell `k` is centred at image
/// coordinate `(k + 0.5) * stride`. Every bin is covered by
/// `ceil(bin extent in cells)` samples per axis, so a box that covers a
/// single cell with `grid = 1` samples exactly that cell's centre.
pub fn region_weights(bbox: &BBox, h: usize, w: usize, stride: usize, grid: usize) -> Vec<f64> {
    assert!(grid >= 1 && h >= 1 && w >= 1);
    let s = stride as f64;
    let b = bbox.clip((w * stride) as f64, (h * stride) as f64);
    let xs = axis_samples(b.x1, b.x2, s, grid);
    let ys = axis_samples(b.y1, b.y2, s, grid);
    let mut wx = vec![0.0; w];
    for &u in &xs {
        for (k, t) in bilinear_taps(u, w) {
            wx[k] += t / xs.len() as f64;
        }
    }
    let mut wy = vec![0.0; h];
    for &v in &ys {
        for (k, t) in bilinear_taps(v, h) {
            wy[k] += t / ys.len() as f64;
        }
    }
    let mut out = vec![0.0; h * w];
    for (r, &a) in wy.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (c, &bw) in wx.iter().enumerate() {
            out[r * w + c] = a * bw;
        }
    }
    out
}

/// Pooled feature vectors for `(batch index, box)` pairs, shape `(n, F)`.
pub fn pool_regions(fm: &FeatureMap, regions: &[(usize, BBox)], grid: usize) -> Result<Tensor> {
    let (b, h, w, f) = fm.tensor.dims4()?;
    let dtype = fm.tensor.dtype();
    let device = fm.tensor.device();
    if grid == 0 {
        return Err(Error::Shape("pool grid must be positive".into()));
    }
    if regions.is_empty() {
        return Ok(Tensor::zeros((0, f), dtype, device)?);
    }
    if let Some(&(bad, _)) = regions.iter().find(|(i, _)| *i >= b) {
        return Err(Error::Shape(format!("batch index {bad} out of range for batch of {b}")));
    }
    let mut order: Vec<usize> = (0..regions.len()).collect();
    order.sort_by_key(|&k| regions[k].0);
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let img = regions[order[start]].0;
        let mut end = start;
        let mut weights = Vec::new();
        while end < order.len() && regions[order[end]].0 == img {
            weights.extend(region_weights(&regions[order[end]].1, h, w, fm.stride, grid));
            end += 1;
        }
        let wm = Tensor::from_vec(weights, (end - start, h * w), device)?.to_dtype(dtype)?;
        let feats = fm.tensor.get(img)?.reshape((h * w, f))?;
        chunks.push(wm.matmul(&feats)?);
        start = end;
    }
    let pooled = Tensor::cat(&chunks, 0)?;
    if order.iter().enumerate().all(|(k, &o)| k == o) {
        return Ok(pooled);
    }
    let mut inverse = vec![0u32; order.len()];
    for (pos, &orig) in order.iter().enumerate() {
        inverse[orig] = pos as u32;
    }
    let idx = Tensor::from_vec(inverse, order.len(), device)?;
    Ok(pooled.index_select(&idx, 0)?)
}

/// Pooled feature of a single box in image `batch_index`, shape `(F,)`.
pub fn pool_region(fm: &FeatureMap, batch_index: usize, bbox: &BBox, grid: usize) -> Result<Tensor> {
    Ok(pool_regions(fm, &[(batch_index, *bbox)], grid)?.squeeze(0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(values: Vec<f64>, h: usize, w: usize, f: usize) -> FeatureMap {
        FeatureMap {
            tensor: Tensor::from_vec(values, (1, h, w, f), &Device::Cpu).unwrap(),
            stride: 8,
        }
    }

    fn vec1(t: &Tensor) -> Vec<f64> {
        t.to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    #[test]
    fn constant_map_gives_constant() {
        let fm = map(vec![2.5; 4 * 4 * 3], 4, 4, 3);
        for b in [BBox::new(0., 0., 32., 32.).unwrap(), BBox::new(3., 7., 11., 30.).unwrap()] {
            for v in vec1(&pool_region(&fm, 0, &b, 7).unwrap()) {
                assert!((v - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_cell_box_with_one_bin() {
        let vals: Vec<f64> = (0..16).map(|k| k as f64).collect();
        let fm = map(vals, 4, 4, 1);
        let b = BBox::new(16., 8., 24., 16.).unwrap();
        assert_eq!(vec1(&pool_region(&fm, 0, &b, 1).unwrap()), vec![6.0]);
    }

    #[test]
    fn zero_area_box_samples_centre() {
        let vals: Vec<f64> = (0..16).map(|k| k as f64).collect();
        let fm = map(vals, 4, 4, 1);
        // Centre of cell (1, 2) is at (20, 12).
        let b = BBox::new(20., 12., 20., 12.).unwrap();
        let v = vec1(&pool_region(&fm, 0, &b, 7).unwrap());
        assert!((v[0] - 6.0).abs() < 1e-12);
    }

    fn bilinear(vals: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
        let mut acc = 0.0;
        for (r, a) in bilinear_taps(v, h) {
            for (c, b) in bilinear_taps(u, w) {
                acc += a * b * vals[r * w + c];
            }
        }
        acc
    }

    #[test]
    fn matches_dense_monte_carlo_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (h, w) = (8, 8);
            let vals: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
            let fm = map(vals.clone(), h, w, 1);
            let xa = rng.random_range(0.0..64.0);
            let xb = rng.random_range(0.0..64.0);
            let ya = rng.random_range(0.0..64.0);
            let yb = rng.random_range(0.0..64.0);
            let b = BBox::from_corners(xa, ya, xb, yb);
            let mut acc = 0.0;
            for i in 0..64 {
                for j in 0..64 {
                    let x = b.x1 + (j as f64 + 0.5) / 64.0 * b.width();
                    let y = b.y1 + (i as f64 + 0.5) / 64.0 * b.height();
                    acc += bilinear(&vals, h, w, x / 8.0 - 0.5, y / 8.0 - 0.5);
                }
            }
            let oracle = acc / 4096.0;
            let got = vec1(&pool_region(&fm, 0, &b, 7).unwrap())[0];
            assert!((got - oracle).abs() < 0.05, "box {b:?}: {got} vs {oracle}");
        }
    }

    #[test]
    fn batch_rows_keep_input_order() {
        let dev = Device::Cpu;
        let t = Tensor::arange(0f64, 2.0 * 2.0 * 2.0, &dev).unwrap().reshape((2, 2, 2, 1)).unwrap();
        let fm = FeatureMap { tensor: t, stride: 8 };
        let b = BBox::new(0., 0., 8., 8.).unwrap();
        let out = pool_regions(&fm, &[(1, b), (0, b), (1, b)], 1).unwrap();
        let v: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![4.0, 0.0, 4.0]);
        assert!(pool_regions(&fm, &[(2, b)], 1).is_err());
        assert_eq!(pool_regions(&fm, &[], 7).unwrap().dims(), &[0, 1]);
    }

    proptest! {
        #[test]
        fn weights_sum_to_one(xa in 0.0..64.0f64, xb in 0.0..64.0f64, ya in 0.0..64.0f64, yb in 0.0..64.0f64, grid in 1usize..8) {
            let b = BBox::from_corners(xa, ya, xb, yb);
            let s: f64 = region_weights(&b, 8, 8, 8, grid).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn pooling_is_linear(seed in 0u64..1000, alpha in -3.0..3.0f64, beta in -3.0..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..8 * 8 * 2).map(|_| rng.random::<f64>()).collect();
            let c: Vec<f64> = (0..8 * 8 * 2).map(|_| rng.random::<f64>()).collect();
            let mix: Vec<f64> = a.iter().zip(&c).map(|(x, y)| alpha * x + beta * y).collect();
            let b = BBox::from_corners(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
            let pa = vec1(&pool_region(&map(a, 8, 8, 2), 0, &b, 7).unwrap());
            let pc = vec1(&pool_region(&map(c, 8, 8, 2), 0, &b, 7).unwrap());
            let pm = vec1(&pool_region(&map(mix, 8, 8, 2), 0, &b, 7).unwrap());
            for k in 0..2 {
                prop_assert!((pm[k] - (alpha * pa[k] + beta * pc[k])).abs() < 1e-6);
            }
        }
    }
}
