//! Training-time box jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{union_box, BBox};

/// Shifts every corner coordinate of each box by `lambda` times a uniform
/// draw in `(-w, w)` horizontally and `(-h, h)` vertically, where `w` and
/// `h` are that box's own size. Coordinates are re-sorted and clipped to the
/// image, so the result is always a valid box.
pub fn perturb_boxes(boxes: &[BBox], lambda: f64, image_size: (usize, usize), seed: u64) -> Vec<BBox> {
    if lambda == 0.0 {
        return boxes.to_vec();
    }
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    boxes
        .iter()
        .map(|b| {
            let (w, h) = (b.width(), b.height());
            let mut draw = |s: f64| if s > 0.0 { lambda * rng.random_range(-s..s) } else { 0.0 };
            let dx1 = draw(w);
            let dy1 = draw(h);
            let dx2 = draw(w);
            let dy2 = draw(h);
            BBox::from_corners(b.x1 + dx1, b.y1 + dy1, b.x2 + dx2, b.y2 + dy2).clip(iw, ih)
        })
        .collect()
}

/// Union boxes of `pairs` over (possibly perturbed) node boxes.
pub fn edge_union_boxes(node_boxes: &[BBox], pairs: &[(usize, usize)]) -> Vec<BBox> {
    pairs
        .iter()
        .map(|&(i, j)| union_box(&node_boxes[i], &node_boxes[j]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_lambda_is_identity() {
        let b = vec![BBox::new(1.0, 2.0, 30.0, 40.0).unwrap(), BBox::new(0.0, 0.0, 0.0, 0.0).unwrap()];
        assert_eq!(perturb_boxes(&b, 0.0, (64, 64), 3), b);
    }

    #[test]
    fn mean_absolute_shift_is_half_lambda_width() {
        // Box far from the borders so clipping never triggers.
        let (w, h) = (40.0, 20.0);
        let b = BBox::new(480.0, 490.0, 480.0 + w, 490.0 + h).unwrap();
        let lambda = 0.125;
        let n = 10_000;
        let mut sx = 0.0;
        let mut sy = 0.0;
        for s in 0..n {
            let p = perturb_boxes(&[b], lambda, (1000, 1000), s)[0];
            sx += (p.x1 - b.x1).abs();
            sy += (p.y1 - b.y1).abs();
        }
        let (ex, ey) = (lambda * w / 2.0, lambda * h / 2.0);
        assert!(((sx / n as f64) - ex).abs() < 0.05 * ex);
        assert!(((sy / n as f64) - ey).abs() < 0.05 * ey);
    }

    #[test]
    fn union_boxes_follow_nodes() {
        let b = vec![BBox::new(0.0, 0.0, 2.0, 2.0).unwrap(), BBox::new(5.0, 1.0, 6.0, 8.0).unwrap()];
        assert_eq!(edge_union_boxes(&b, &[(0, 1)]), vec![BBox::new(0.0, 0.0, 6.0, 8.0).unwrap()]);
    }

    proptest! {
        #[test]
        fn perturbed_boxes_stay_valid(
            x in 0.0..60.0f64, y in 0.0..60.0f64, w in 0.0..30.0f64, h in 0.0..30.0f64,
            lambda in 0.0..3.0f64, seed in any::<u64>()
        ) {
            let b = BBox::new(x, y, (x + w).min(64.0), (y + h).min(64.0)).unwrap();
            let p = perturb_boxes(&[b], lambda, (64, 64), seed)[0];
            prop_assert!(p.is_valid());
            prop_assert!(p.x1 >= 0.0 && p.y1 >= 0.0 && p.x2 <= 64.0 && p.y2 <= 64.0);
        }
    }
}
