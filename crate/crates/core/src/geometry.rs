//! Box geometry, directional relation rules and binary-mask utilities.
//!
//! Boxes use the pixel-edge convention: `x2`/`y2` are exclusive, so a box
//! covering the single pixel `(3, 5)` is `(3, 5, 4, 6)` and its area is
//! `(x2 - x1) * (y2 - y1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum fraction of the smaller box covered by the intersection for a
/// pair to be labelled inside-outside.
pub const CONTAINMENT_THRESHOLD: f64 = 0.8;

/// Axis-aligned rectangle in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite or inverted coordinates.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox([x1, y1, x2, y2]))
        }
    }

    /// Builds a box from two arbitrary corners, sorting each axis.
    pub fn from_corners(xa: f64, ya: f64, xb: f64, yb: f64) -> Self {
        Self {
            x1: xa.min(xb),
            y1: ya.min(yb),
            x2: xa.max(xb),
            y2: ya.max(yb),
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x1 <= self.x2
            && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clamps the box into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        Self {
            x1: self.x1.clamp(0.0, width),
            y1: self.y1.clamp(0.0, height),
            x2: self.x2.clamp(0.0, width),
            y2: self.y2.clamp(0.0, height),
        }
    }

    /// Coordinates divided by the image size, as fed to the networks.
    pub fn normalized(&self, width: f64, height: f64) -> [f64; 4] {
        [self.x1 / width, self.y1 / height, self.x2 / width, self.y2 / height]
    }

    /// Intersection box, or `None` when the boxes do not overlap with
    /// positive area.
    pub fn intersection(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x1.max(other.x1);
        let y1 = self.y1.max(other.y1);
        let x2 = self.x2.min(other.x2);
        let y2 = self.y2.min(other.y2);
        (x2 > x1 && y2 > y1).then_some(BBox { x1, y1, x2, y2 })
    }

    /// Mirrors the box horizontally inside an image of the given width.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        Self {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }
}

fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    a.intersection(b).map_or(0.0, |i| i.area())
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: IoU minus the fraction of the smallest enclosing box not
/// covered by the union.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    let hull = union_box(a, b).area();
    if hull <= 0.0 {
        // Both boxes degenerate and coincident (or collinear): nothing to
        // penalise beyond the plain IoU.
        return if union <= 0.0 { 0.0 } else { inter / union };
    }
    let iou = if union <= 0.0 { 0.0 } else { inter / union };
    iou - (hull - union) / hull
}

/// Smallest box enclosing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> BBox {
    BBox {
        x1: a.x1.min(b.x1),
        y1: a.y1.min(b.y1),
        x2: a.x2.max(b.x2),
        y2: a.y2.max(b.y2),
    }
}

/// Relation classes; 0 is the "none" class used for unmatched edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum RelationClass {
    None = 0,
    LeftRight = 1,
    UpDown = 2,
    InsideOutside = 3,
}

impl RelationClass {
    /// Number of relation classes including "none".
    pub const COUNT: usize = 4;

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        match id {
            0 => Ok(Self::None),
            1 => Ok(Self::LeftRight),
            2 => Ok(Self::UpDown),
            3 => Ok(Self::InsideOutside),
            _ => Err(Error::InvalidRelation(id)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::LeftRight => "left-right",
            Self::UpDown => "up-down",
            Self::InsideOutside => "inside-outside",
        }
    }
}

/// Directional relation between two boxes.
///
/// Containment (intersection over the smaller area at least
/// [`CONTAINMENT_THRESHOLD`]) wins; otherwise the dominant axis of the
/// center displacement decides, with ties going to left-right. The rule is
/// symmetric in its arguments.
pub fn relation_rule(a: &BBox, b: &BBox) -> RelationClass {
    let smaller = a.area().min(b.area());
    if smaller > 0.0 && intersection_area(a, b) / smaller >= CONTAINMENT_THRESHOLD {
        return RelationClass::InsideOutside;
    }
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    if (ax - bx).abs() >= (ay - by).abs() {
        RelationClass::LeftRight
    } else {
        RelationClass::UpDown
    }
}

/// Row-major boolean raster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "mask data has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Mask whose set pixels are exactly those with centers inside `b`.
    pub fn from_box(width: usize, height: usize, b: &BBox) -> Self {
        let mut m = Self::new(width, height);
        let (xs, xe) = pixel_span(b.x1, b.x2, width);
        let (ys, ye) = pixel_span(b.y1, b.y2, height);
        for y in ys..ye {
            for x in xs..xe {
                m.set(x, y, true);
            }
        }
        m
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    pub fn count_overlap(&self, other: &BinaryMask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// Index range of pixels whose centers `p + 0.5` fall in `[lo, hi)`.
pub(crate) fn pixel_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let start = (lo - 0.5).ceil().max(0.0) as usize;
    let end = ((hi - 0.5).ceil().max(0.0) as usize).min(limit);
    (start.min(limit), end)
}

/// 4-connected components, largest first; equal areas keep scan order of
/// their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<BinaryMask> {
    let (w, h) = (mask.width, mask.height);
    let mut label = vec![usize::MAX; w * h];
    let mut comps: Vec<(usize, BinaryMask)> = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || label[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut comp = BinaryMask::new(w, h);
        let mut area = 0;
        label[start] = id;
        stack.push(start);
        while let Some(p) = stack.pop() {
            comp.data[p] = true;
            area += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if mask.data[q] && label[q] == usize::MAX {
                    label[q] = id;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        comps.push((area, comp));
    }
    // Stable sort keeps discovery (scan) order among equal areas.
    comps.sort_by(|a, b| b.0.cmp(&a.0));
    comps.into_iter().map(|(_, m)| m).collect()
}

/// Minimal enclosing box of the set pixels.
pub fn tight_box(mask: &BinaryMask) -> Result<BBox> {
    let mut x_min = usize::MAX;
    let mut y_min = usize::MAX;
    let mut x_max = 0;
    let mut y_max = 0;
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                x_min = x_min.min(x);
                y_min = y_min.min(y);
                x_max = x_max.max(x);
                y_max = y_max.max(y);
            }
        }
    }
    if x_min == usize::MAX {
        return Err(Error::EmptyMask);
    }
    Ok(BBox {
        x1: x_min as f64,
        y1: y_min as f64,
        x2: (x_max + 1) as f64,
        y2: (y_max + 1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)), 0.0);
        assert_abs_diff_eq!(iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)), 1.0 / 7.0, epsilon = 1e-12);
        assert_eq!(iou(&b(1., 1., 1., 1.), &b(1., 1., 1., 1.)), 0.0);
    }

    #[test]
    fn giou_examples() {
        let a = b(0., 0., 2., 2.);
        assert_eq!(giou(&a, &a), 1.0);
        assert_abs_diff_eq!(giou(&b(0., 0., 1., 1.), &b(2., 0., 3., 1.)), -1.0 / 3.0, epsilon = 1e-12);
        // Enclosing box equals the union: no penalty.
        let (p, q) = (b(0., 0., 2., 2.), b(0., 0., 2., 1.));
        assert_eq!(giou(&p, &q), iou(&p, &q));
    }

    #[test]
    fn union_box_examples() {
        let a = b(0., 0., 1., 1.);
        assert_eq!(union_box(&a, &a), a);
        assert_eq!(union_box(&a, &b(2., 2., 3., 3.)), b(0., 0., 3., 3.));
        assert_eq!(union_box(&b(0., 0., 10., 10.), &b(2., 2., 4., 4.)), b(0., 0., 10., 10.));
    }

    #[test]
    fn relation_examples() {
        assert_eq!(relation_rule(&b(0., 0., 10., 10.), &b(2., 2., 4., 4.)), RelationClass::InsideOutside);
        assert_eq!(relation_rule(&b(0., 0., 2., 2.), &b(10., 0., 12., 2.)), RelationClass::LeftRight);
        assert_eq!(relation_rule(&b(0., 0., 2., 2.), &b(0., 10., 2., 12.)), RelationClass::UpDown);
        // Diagonal tie goes to left-right.
        assert_eq!(relation_rule(&b(0., 0., 2., 2.), &b(5., 5., 7., 7.)), RelationClass::LeftRight);
    }

    #[test]
    fn invalid_box_rejected() {
        assert!(BBox::new(2., 0., 1., 1.).is_err());
        assert!(BBox::new(f64::NAN, 0., 1., 1.).is_err());
    }

    fn mask_from_rows(rows: &[&str]) -> BinaryMask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.chars().map(|c| c == '#')).collect();
        BinaryMask::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn components_examples() {
        assert!(connected_components(&BinaryMask::new(5, 5)).is_empty());
        let solid = mask_from_rows(&["....", ".###", ".###", ".###"]);
        let c = connected_components(&solid);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].area(), 9);
        let diag = mask_from_rows(&["#..", ".#.", "..."]);
        assert_eq!(connected_components(&diag).len(), 2);
    }

    #[test]
    fn components_sorted_by_area_then_scan_order() {
        let m = mask_from_rows(&["#.#.##", "......", "###..."]);
        let c = connected_components(&m);
        let areas: Vec<_> = c.iter().map(|m| m.area()).collect();
        assert_eq!(areas, vec![3, 2, 1, 1]);
        assert!(c[2].get(0, 0));
        assert!(c[3].get(2, 0));
    }

    #[test]
    fn tight_box_examples() {
        let mut m = BinaryMask::new(10, 10);
        m.set(3, 5, true);
        assert_eq!(tight_box(&m).unwrap(), b(3., 5., 4., 6.));
        let full = BinaryMask::from_vec(7, 4, vec![true; 28]).unwrap();
        assert_eq!(tight_box(&full).unwrap(), b(0., 0., 7., 4.));
        let mut l = BinaryMask::new(10, 10);
        for y in 2..8 {
            l.set(1, y, true);
        }
        for x in 1..5 {
            l.set(x, 7, true);
        }
        assert_eq!(tight_box(&l).unwrap(), b(1., 2., 5., 8.));
        assert!(matches!(tight_box(&BinaryMask::new(3, 3)), Err(Error::EmptyMask)));
    }

    #[test]
    fn from_box_matches_tight_box() {
        let bx = b(2., 3., 6., 5.);
        let m = BinaryMask::from_box(8, 8, &bx);
        assert_eq!(m.area(), 8);
        assert_eq!(tight_box(&m).unwrap(), bx);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..50.0f64, 0.0..50.0f64, 0.0..30.0f64, 0.0..30.0f64)
            .prop_map(|(x, y, w, h)| BBox { x1: x, y1: y, x2: x + w, y2: y + h })
    }

    proptest! {
        #[test]
        fn giou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let g = giou(&a, &c);
            prop_assert!((g - giou(&c, &a)).abs() < 1e-12);
            prop_assert!(g <= iou(&a, &c) + 1e-12);
            prop_assert!(g > -1.0 - 1e-12 && g <= 1.0 + 1e-12);
        }

        #[test]
        fn union_box_laws(a in arb_box(), c in arb_box(), d in arb_box()) {
            prop_assert_eq!(union_box(&a, &c), union_box(&c, &a));
            prop_assert_eq!(union_box(&union_box(&a, &c), &d), union_box(&a, &union_box(&c, &d)));
            prop_assert_eq!(union_box(&a, &a), a);
        }

        #[test]
        fn relation_symmetric_and_total(a in arb_box(), c in arb_box()) {
            let r = relation_rule(&a, &c);
            prop_assert_eq!(r, relation_rule(&c, &a));
            prop_assert!(r != RelationClass::None);
        }

        #[test]
        fn giou_decreases_along_translation(a in arb_box(), step in 1.0..10.0f64) {
            prop_assume!(a.width() > 0.5 && a.height() > 0.5);
            let mut last = giou(&a, &a);
            for k in 1..20 {
                let d = step * k as f64;
                let moved = BBox { x1: a.x1 + d, y1: a.y1 + 0.5 * d, x2: a.x2 + d, y2: a.y2 + 0.5 * d };
                let g = giou(&a, &moved);
                prop_assert!(g <= last + 1e-12);
                last = g;
            }
        }

        #[test]
        fn components_partition_pixels(bits in proptest::collection::vec(any::<bool>(), 64)) {
            let m = BinaryMask::from_vec(8, 8, bits).unwrap();
            let comps = connected_components(&m);
            let mut acc = BinaryMask::new(8, 8);
            let mut total = 0;
            for c in &comps {
                prop_assert_eq!(acc.count_overlap(c), 0);
                acc.union_with(c);
                total += c.area();
            }
            prop_assert_eq!(acc, m.clone());
            prop_assert_eq!(total, m.area());
        }
    }
}
