//! Occupancy layouts, feature layouts and backgroundised images.

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask};
use crate::scenegen::RgbImage;

/// Channels-last binary occupancy grid `(H, W, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Layout {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn mark(&mut self, mask: &BinaryMask, c: usize) {
        for y in 0..self.height {
            for x in 0..self.width {
                if mask.get(x, y) {
                    self.data[(y * self.width + x) * self.channels + c] = 1.0;
                }
            }
        }
    }

    /// Channel `c` as a mask.
    pub fn channel(&self, c: usize) -> BinaryMask {
        let data = (0..self.width * self.height)
            .map(|p| self.data[p * self.channels + c] > 0.0)
            .collect();
        BinaryMask::from_vec(self.width, self.height, data).expect("layout size")
    }

    /// Pixels covered by any channel.
    pub fn foreground(&self) -> BinaryMask {
        let data = (0..self.width * self.height)
            .map(|p| self.data[p * self.channels..(p + 1) * self.channels].iter().any(|&v| v > 0.0))
            .collect();
        BinaryMask::from_vec(self.width, self.height, data).expect("layout size")
    }
}

/// Node-per-channel layout: channel `i` covers the pixels whose centres lie in
/// box `i` (min inclusive, max exclusive). `channels` must be at least the
/// number of boxes; extra channels stay zero.
pub fn build_layout(boxes: &[BBox], width: usize, height: usize, channels: usize) -> Result<Layout> {
    if boxes.len() > channels {
        return Err(Error::Shape(format!("{} boxes exceed {channels} layout channels", boxes.len())));
    }
    let mut l = Layout::zeros(width, height, channels);
    for (i, b) in boxes.iter().enumerate() {
        l.mark(&BinaryMask::from_box(width, height, b), i);
    }
    Ok(l)
}

/// Like [`build_layout`] with instance masks in place of boxes.
pub fn build_mask_layout(masks: &[BinaryMask], width: usize, height: usize, channels: usize) -> Result<Layout> {
    if masks.len() > channels {
        return Err(Error::Shape(format!("{} masks exceed {channels} layout channels", masks.len())));
    }
    let mut l = Layout::zeros(width, height, channels);
    for (i, m) in masks.iter().enumerate() {
        if (m.width(), m.height()) != (width, height) {
            return Err(Error::Shape("mask size differs from layout size".into()));
        }
        l.mark(m, i);
    }
    Ok(l)
}

/// Class-per-channel layout: channel `c` is the union of the boxes of class
/// `c`.
pub fn build_class_layout(
    boxes: &[BBox],
    classes: &[usize],
    width: usize,
    height: usize,
    num_classes: usize,
) -> Result<Layout> {
    let mut l = Layout::zeros(width, height, num_classes);
    for (b, &c) in boxes.iter().zip(classes) {
        if c >= num_classes {
            return Err(Error::Shape(format!("class {c} outside {num_classes} layout channels")));
        }
        l.mark(&BinaryMask::from_box(width, height, b), c);
    }
    Ok(l)
}

/// Stack of equally sized layouts as a `(B, H, W, channels)` tensor.
pub fn layouts_to_tensor(layouts: &[Layout], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = layouts
        .first()
        .ok_or_else(|| Error::Shape("no layouts to stack".into()))?;
    let (w, h, c) = (first.width, first.height, first.channels);
    let mut flat = Vec::with_capacity(layouts.len() * w * h * c);
    for l in layouts {
        if (l.width, l.height, l.channels) != (w, h, c) {
            return Err(Error::Shape("layouts differ in size".into()));
        }
        flat.extend_from_slice(&l.data);
    }
    Ok(Tensor::from_vec(flat, (layouts.len(), h, w, c), device)?.to_dtype(dtype)?)
}

/// Per-pixel sum of node feature rows weighted by occupancy: `(B, H, W, F)`
/// from a `(B, H, W, N)` layout and `(B, N, F)` node features.
pub fn build_feature_layout(layout: &Tensor, node_features: &Tensor) -> Result<Tensor> {
    let (b, h, w, n) = layout.dims4()?;
    let (b2, n2, f) = node_features.dims3()?;
    if b != b2 || n != n2 {
        return Err(Error::Shape(format!(
            "layout {:?} does not match node features {:?}",
            layout.dims(),
            node_features.dims()
        )));
    }
    Ok(layout.reshape((b, h * w, n))?.matmul(node_features)?.reshape((b, h, w, f))?)
}

/// Copy of `image` with every pixel whose centre lies in one of `boxes`
/// replaced by standard normal noise clipped to `[0, 1]`.
pub fn backgroundize(image: &RgbImage, boxes: &[BBox], seed: u64) -> RgbImage {
    let mut out = image.clone();
    let mut fg = BinaryMask::new(image.width, image.height);
    for b in boxes {
        fg.union_with(&BinaryMask::from_box(image.width, image.height, b));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for y in 0..image.height {
        for x in 0..image.width {
            if fg.get(x, y) {
                let v: [f32; 3] = std::array::from_fn(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z.clamp(0.0, 1.0) as f32
                });
                out.set_pixel(x, y, v);
            }
        }
    }
    out
}

/// Images as a `(B, H, W, 3)` tensor.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("no images to stack".into()))?;
    let (w, h) = (first.width, first.height);
    let mut flat = Vec::with_capacity(images.len() * w * h * 3);
    for im in images {
        if (im.width, im.height) != (w, h) {
            return Err(Error::Shape("images differ in size".into()));
        }
        flat.extend_from_slice(&im.data);
    }
    Ok(Tensor::from_vec(flat, (images.len(), h, w, 3), device)?.to_dtype(dtype)?)
}

/// One `(H, W, 3)` slice of an image tensor back to an image.
pub fn tensor_to_image(t: &Tensor) -> Result<RgbImage> {
    let (h, w, c) = t.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
    })
}
