//! PNG dumps of reconstructions and layouts.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scenegen::RgbImage;

use super::Layout;

pub fn save_rgb_png(image: &RgbImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

/// One single-channel PNG per non-empty layout channel, named
/// `{stem}_node{k:02}.png` in `dir`.
pub fn save_layout_pngs(layout: &Layout, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for c in 0..layout.channels {
        let mask = layout.channel(c);
        if mask.is_empty() {
            continue;
        }
        let bytes: Vec<u8> = mask.as_slice().iter().map(|&v| if v { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(layout.width as u32, layout.height as u32, bytes)
            .ok_or_else(|| Error::Shape("layout buffer size".into()))?;
        let path = dir.join(format!("{stem}_node{c:02}.png"));
        buf.save_with_format(&path, image::ImageFormat::Png)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoders::build_layout;
    use crate::geometry::BBox;

    #[test]
    fn writes_one_png_per_node() {
        let dir = tempfile::tempdir().unwrap();
        let l = build_layout(&[BBox::new(0., 0., 4., 4.).unwrap(), BBox::new(2., 2., 8., 8.).unwrap()], 8, 8, 4).unwrap();
        let paths = save_layout_pngs(&l, dir.path(), "img").unwrap();
        assert_eq!(paths.len(), 2);
        let back = image::open(&paths[1]).unwrap().to_luma8();
        assert_eq!(back.get_pixel(5, 5).0[0], 255);
        assert_eq!(back.get_pixel(0, 0).0[0], 0);
        save_rgb_png(&RgbImage::new(8, 8), &dir.path().join("x.png")).unwrap();
    }
}
