//! Synthetic scene generator.
//!
//! Scenes are toy renderings of the six foreground structures (a large
//! blob, two thin tubes, a triangle, a crescent and tools) over a textured
//! background. Three binary pseudo-criteria are derived from the rendered
//! geometry so labels are exact:
//!
//! * C1: both tubes are visible and each reaches into the lower half of the
//!   large blob's box.
//! * C2: the triangle carries the "cleared" texture and its visible area is
//!   at least `tau_triangle` of the full-scale triangle.
//! * C3: at least `tau_plate` of the crescent is visible.

mod annotate;
mod io;

pub use annotate::{boxes_from_semantic_mask, build_gt_scene_graph};
pub use io::{decode_rle, encode_rle, read_dataset, write_dataset};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{union_box, BBox, BinaryMask, RelationClass};

pub const NUM_CLASSES: usize = 7;
pub const BACKGROUND: usize = 0;
pub const GALLBLADDER: usize = 1;
pub const DUCT: usize = 2;
pub const ARTERY: usize = 3;
pub const TRIANGLE: usize = 4;
pub const PLATE: usize = 5;
pub const TOOL: usize = 6;

/// Pixels a tube must place inside the lower half of the blob box to count
/// as entering it.
pub const MIN_TOUCH_PIXELS: usize = 2;

/// Ordered class names; index 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectClassSet {
    pub names: Vec<String>,
}

impl Default for ObjectClassSet {
    fn default() -> Self {
        let names = [
            "background",
            "gallbladder",
            "cystic-duct",
            "cystic-artery",
            "hct-triangle",
            "cystic-plate",
            "tool",
        ];
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ObjectClassSet {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Row-major `H x W x 3` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    /// Snaps every value to the nearest 8-bit level so PNG round-trips are
    /// exact.
    pub fn quantize(&mut self) {
        for v in &mut self.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub bbox: BBox,
    pub class_id: usize,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub i: usize,
    pub j: usize,
    pub class: RelationClass,
}

/// One dataset example.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneRecord {
    pub image: RgbImage,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub cvs: [u8; 3],
}

impl SceneRecord {
    pub fn width(&self) -> usize {
        self.image.width
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn boxes(&self) -> Vec<BBox> {
        self.objects.iter().map(|o| o.bbox).collect()
    }
}

/// Forces specific scene contents, used for fixtures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneOverride {
    #[default]
    Random,
    /// No foreground structure at all.
    AllAbsent,
    /// Every structure present, cleared, unoccluded and entering the blob.
    CanonicalFull,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub width: usize,
    pub height: usize,
    pub p_gallbladder: f64,
    pub p_duct: f64,
    pub p_artery: f64,
    /// Probability that a tube reaches into the blob's lower half.
    pub p_enter: f64,
    pub p_triangle: f64,
    pub p_cleared: f64,
    pub p_plate: f64,
    /// Probabilities of rendering 0, 1 or 2 tools.
    pub tool_count_probs: [f64; 3],
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub tau_triangle: f64,
    pub tau_plate: f64,
    #[serde(rename = "override")]
    pub scene_override: SceneOverride,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            p_gallbladder: 0.95,
            p_duct: 0.8,
            p_artery: 0.8,
            p_enter: 0.55,
            p_triangle: 0.75,
            p_cleared: 0.6,
            p_plate: 0.8,
            tool_count_probs: [0.4, 0.4, 0.2],
            noise: 0.03,
            tau_triangle: 0.5,
            tau_plate: 0.3,
            scene_override: SceneOverride::Random,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::Config(format!(
                "image size {}x{} is below the 16x16 minimum",
                self.width, self.height
            )));
        }
        if self.width % 8 != 0 || self.height % 8 != 0 {
            return Err(Error::Config(format!(
                "image size {}x{} must be a multiple of 8",
                self.width, self.height
            )));
        }
        let probs = [
            self.p_gallbladder,
            self.p_duct,
            self.p_artery,
            self.p_enter,
            self.p_triangle,
            self.p_cleared,
            self.p_plate,
            self.tau_triangle,
            self.tau_plate,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("generator probabilities must lie in [0, 1]".into()));
        }
        let total: f64 = self.tool_count_probs.iter().sum();
        if self.tool_count_probs.iter().any(|p| *p < 0.0) || (total - 1.0).abs() > 1e-6 {
            return Err(Error::Config("tool_count_probs must be a distribution".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scene parameters needed to evaluate the criteria beyond the masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    pub triangle_cleared: bool,
    /// Pixel area of the triangle at full scale.
    pub triangle_nominal_area: f64,
    /// Pixel count of the crescent before occlusion.
    pub plate_full_area: usize,
}

/// Deterministic scene for `(seed, config)`.
pub fn synth_scene(seed: u64, config: &GeneratorConfig) -> Result<SceneRecord> {
    synth_scene_detailed(seed, config, 4).map(|(r, _)| r)
}

/// Like [`synth_scene`] but also returns the label-relevant parameters and
/// takes the number of ground-truth edges per node.
pub fn synth_scene_detailed(
    seed: u64,
    config: &GeneratorConfig,
    edges_per_node: usize,
) -> Result<(SceneRecord, SceneParams)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = ScenePlan::sample(&mut rng, config);
    let canvas = plan.render(&mut rng, config)?;
    let objects = boxes_from_semantic_mask(&canvas.semantic, config.width, config.height, &ObjectClassSet::default());
    let params = SceneParams {
        triangle_cleared: plan.triangle.map_or(false, |t| t.cleared),
        triangle_nominal_area: plan.triangle.map_or(0.0, |t| t.nominal_area(config)),
        plate_full_area: canvas.plate_full_area,
    };
    let cvs = criteria_from_geometry(&objects, &params, config);
    let relations = build_gt_scene_graph(&objects, edges_per_node);
    Ok((
        SceneRecord {
            image: canvas.image,
            objects,
            relations,
            cvs,
        },
        params,
    ))
}

/// Evaluates the three pseudo-criteria on annotated geometry.
pub fn criteria_from_geometry(objects: &[SceneObject], params: &SceneParams, config: &GeneratorConfig) -> [u8; 3] {
    let of_class = |c: usize| objects.iter().filter(move |o| o.class_id == c);
    let c1 = match of_class(GALLBLADDER).map(|o| o.bbox).reduce(|a, b| union_box(&a, &b)) {
        Some(gb) => {
            let cy = gb.center().1;
            let lower = BBox {
                x1: gb.x1,
                y1: cy,
                x2: gb.x2,
                y2: gb.y2,
            };
            let lower_mask = BinaryMask::from_box(config.width, config.height, &lower);
            let enters = |c: usize| of_class(c).any(|o| o.mask.count_overlap(&lower_mask) >= MIN_TOUCH_PIXELS);
            enters(DUCT) && enters(ARTERY)
        }
        None => false,
    };
    let triangle_area: usize = of_class(TRIANGLE).map(|o| o.mask.area()).sum();
    let c2 = params.triangle_cleared
        && triangle_area > 0
        && triangle_area as f64 >= config.tau_triangle * params.triangle_nominal_area;
    let plate_area: usize = of_class(PLATE).map(|o| o.mask.area()).sum();
    let c3 = plate_area > 0 && plate_area as f64 >= config.tau_plate * params.plate_full_area as f64;
    [c1 as u8, c2 as u8, c3 as u8]
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, u: f64, v: f64) -> bool {
        let dx = (u - self.cx) / self.rx;
        let dy = (v - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Tube {
    start: (f64, f64),
    end: (f64, f64),
    width: f64,
}

impl Tube {
    fn contains(&self, u: f64, v: f64) -> bool {
        let (ax, ay) = self.start;
        let (bx, by) = self.end;
        let (dx, dy) = (bx - ax, by - ay);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((u - ax) * dx + (v - ay) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (ax + t * dx - u, ay + t * dy - v);
        px * px + py * py <= 0.25 * self.width * self.width
    }
}

#[derive(Debug, Clone, Copy)]
struct Triangle {
    apex: (f64, f64),
    scale: f64,
    cleared: bool,
}

impl Triangle {
    const LEFT: (f64, f64) = (-0.15, 0.30);
    const RIGHT: (f64, f64) = (0.10, 0.26);

    fn vertices(&self, scale: f64) -> [(f64, f64); 3] {
        let (ax, ay) = self.apex;
        [
            (ax, ay),
            (ax + scale * Self::LEFT.0, ay + scale * Self::LEFT.1),
            (ax + scale * Self::RIGHT.0, ay + scale * Self::RIGHT.1),
        ]
    }

    fn contains(&self, u: f64, v: f64) -> bool {
        let [a, b, c] = self.vertices(self.scale);
        let s = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
        let (d1, d2, d3) = (s(a, b), s(b, c), s(c, a));
        let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
        let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
        !(neg && pos)
    }

    fn nominal_area(&self, config: &GeneratorConfig) -> f64 {
        let [a, b, c] = self.vertices(1.0);
        let w = config.width as f64;
        let h = config.height as f64;
        0.5 * ((b.0 - a.0) * w * (c.1 - a.1) * h - (c.0 - a.0) * w * (b.1 - a.1) * h).abs()
    }
}

#[derive(Debug, Clone, Copy)]
struct Crescent {
    outer: Ellipse,
    inner: Ellipse,
}

impl Crescent {
    fn contains(&self, u: f64, v: f64) -> bool {
        self.outer.contains(u, v) && !self.inner.contains(u, v)
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl Rect {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.x1 && u < self.x2 && v >= self.y1 && v < self.y2
    }
}

/// Sampled scene layout in unit coordinates (`u` across, `v` down).
#[derive(Debug, Clone)]
struct ScenePlan {
    gallbladder: Option<Ellipse>,
    plate: Option<Crescent>,
    triangle: Option<Triangle>,
    duct: Option<Tube>,
    artery: Option<Tube>,
    tools: Vec<Rect>,
    palette_jitter: [f32; 3],
}

impl ScenePlan {
    fn sample(rng: &mut ChaCha8Rng, config: &GeneratorConfig) -> Self {
        let forced = config.scene_override;
        let present = |rng: &mut ChaCha8Rng, p: f64| match forced {
            SceneOverride::Random => rng.random_bool(p),
            SceneOverride::AllAbsent => false,
            SceneOverride::CanonicalFull => true,
        };

        // The blob geometry is always sampled so later structures keep the
        // same anchor whether or not the blob itself is drawn.
        let blob = Ellipse {
            cx: 0.5 + rng.random_range(-0.06..0.06),
            cy: 0.30 + rng.random_range(-0.04..0.04),
            rx: rng.random_range(0.24..0.30),
            ry: rng.random_range(0.14..0.18),
        };
        let blob_bottom = blob.cy + blob.ry;
        let gallbladder = present(rng, config.p_gallbladder).then_some(blob);

        let plate_present = present(rng, config.p_plate);
        let cover = match forced {
            SceneOverride::CanonicalFull => -0.02,
            _ => rng.random_range(0.06..0.18),
        };
        let plate_cx = blob.cx + rng.random_range(0.10..0.18);
        let plate_cy = blob_bottom - cover + 0.06;
        let plate = plate_present.then(|| {
            let outer = Ellipse {
                cx: plate_cx,
                cy: plate_cy,
                rx: 0.16,
                ry: 0.09,
            };
            Crescent {
                outer,
                inner: Ellipse {
                    cy: plate_cy + 0.07,
                    rx: 0.13,
                    ..outer
                },
            }
        });

        let triangle_present = present(rng, config.p_triangle);
        let triangle = {
            let scale = match forced {
                SceneOverride::CanonicalFull => 1.0,
                _ => rng.random_range(0.45..1.0),
            };
            let cleared = match forced {
                SceneOverride::Random => rng.random_bool(config.p_cleared),
                SceneOverride::AllAbsent => false,
                SceneOverride::CanonicalFull => true,
            };
            let apex = (blob.cx - 0.10 + rng.random_range(-0.03..0.03), blob_bottom - 0.03);
            triangle_present.then_some(Triangle { apex, scale, cleared })
        };

        let tube = |rng: &mut ChaCha8Rng, start_u: (f64, f64), target_u: f64, width: f64, p: f64| {
            let start = (rng.random_range(start_u.0..start_u.1), 0.98);
            let enters = match forced {
                SceneOverride::Random => rng.random_bool(config.p_enter),
                _ => true,
            };
            let end = if enters {
                (
                    target_u + rng.random_range(-0.04..0.04),
                    blob.cy + blob.ry * rng.random_range(0.35..0.75),
                )
            } else {
                (
                    target_u + rng.random_range(-0.04..0.04),
                    blob_bottom + 0.5 * width + rng.random_range(0.07..0.16),
                )
            };
            present(rng, p).then_some(Tube { start, end, width })
        };
        let duct = tube(rng, (0.08, 0.22), blob.cx - 0.16, 0.05, config.p_duct);
        let artery = tube(rng, (0.32, 0.45), blob.cx - 0.02, 0.04, config.p_artery);

        let tool_count = match forced {
            SceneOverride::Random => {
                let r: f64 = rng.random();
                let p = config.tool_count_probs;
                if r < p[0] {
                    0
                } else if r < p[0] + p[1] {
                    1
                } else {
                    2
                }
            }
            _ => 0,
        };
        let tools = (0..tool_count)
            .map(|_| {
                let thickness = rng.random_range(0.07..0.11);
                let length = rng.random_range(0.30..0.55);
                match rng.random_range(0..3) {
                    0 => {
                        let y = rng.random_range(0.45..0.9);
                        Rect { x1: 0.0, y1: y, x2: length, y2: y + thickness }
                    }
                    1 => {
                        let y = rng.random_range(0.45..0.9);
                        Rect { x1: 1.0 - length, y1: y, x2: 1.0, y2: y + thickness }
                    }
                    _ => {
                        let x = rng.random_range(0.55..0.9);
                        Rect { x1: x, y1: 1.0 - length, x2: x + thickness, y2: 1.0 }
                    }
                }
            })
            .collect();

        let palette_jitter = [
            rng.random_range(-0.04..0.04),
            rng.random_range(-0.04..0.04),
            rng.random_range(-0.04..0.04),
        ];
        Self {
            gallbladder,
            plate,
            triangle,
            duct,
            artery,
            tools,
            palette_jitter,
        }
    }

    fn render(&self, rng: &mut ChaCha8Rng, config: &GeneratorConfig) -> Result<Canvas> {
        let (w, h) = (config.width, config.height);
        let mut image = RgbImage::new(w, h);
        let mut semantic = vec![BACKGROUND as u8; w * h];
        let jitter = self.palette_jitter;
        let shade = |c: [f32; 3]| [c[0] + jitter[0], c[1] + jitter[1], c[2] + jitter[2]];

        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                let s = 0.04 * ((6.0 * u + phase).sin() * (5.0 * v).cos()) as f32;
                image.set_pixel(x, y, shade([0.50 + s, 0.22 + s, 0.18 + s]));
            }
        }

        let mut plate_full_area = 0;
        let mut paint = |class: usize, inside: &dyn Fn(f64, f64) -> bool, color: &dyn Fn(usize, usize) -> [f32; 3]| {
            let mut count = 0;
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = ((x as f64 + 0.5) / w as f64, (y as f64 + 0.5) / h as f64);
                    if inside(u, v) {
                        semantic[y * w + x] = class as u8;
                        image.set_pixel(x, y, shade(color(x, y)));
                        count += 1;
                    }
                }
            }
            count
        };

        if let Some(p) = self.plate {
            plate_full_area = paint(PLATE, &|u, v| p.contains(u, v), &|_, _| [0.90, 0.78, 0.70]);
        }
        if let Some(g) = self.gallbladder {
            paint(GALLBLADDER, &|u, v| g.contains(u, v), &|x, y| {
                let t = if (x / 2 + y / 2) % 2 == 0 { 0.03 } else { -0.03 };
                [0.33 + t, 0.48 + t, 0.22]
            });
        }
        if let Some(t) = self.triangle {
            if t.cleared {
                paint(TRIANGLE, &|u, v| t.contains(u, v), &|_, y| {
                    if y % 3 == 0 {
                        [0.95, 0.88, 0.88]
                    } else {
                        [0.55, 0.10, 0.20]
                    }
                });
            } else {
                paint(TRIANGLE, &|u, v| t.contains(u, v), &|_, _| [0.90, 0.80, 0.35]);
            }
        }
        if let Some(d) = self.duct {
            paint(DUCT, &|u, v| d.contains(u, v), &|_, _| [0.72, 0.82, 0.60]);
        }
        if let Some(a) = self.artery {
            paint(ARTERY, &|u, v| a.contains(u, v), &|_, _| [0.90, 0.12, 0.12]);
        }
        for tool in &self.tools {
            paint(TOOL, &|u, v| tool.contains(u, v), &|x, _| {
                if x % 4 == 0 {
                    [0.85, 0.86, 0.90]
                } else {
                    [0.62, 0.64, 0.70]
                }
            });
        }

        if config.noise > 0.0 {
            let normal = Normal::new(0.0, config.noise).map_err(|e| Error::Config(e.to_string()))?;
            for v in &mut image.data {
                *v += normal.sample(rng) as f32;
            }
        }
        image.quantize();
        Ok(Canvas {
            image,
            semantic,
            plate_full_area,
        })
    }
}

struct Canvas {
    image: RgbImage,
    semantic: Vec<u8>,
    plate_full_area: usize,
}

/// Scene seeds for the train/val/test split of `total` scenes (60/20/20).
pub fn split_ranges(first_seed: u64, total: usize) -> [std::ops::Range<u64>; 3] {
    let n_train = total * 3 / 5;
    let n_val = total / 5;
    let a = first_seed;
    let b = a + n_train as u64;
    let c = b + n_val as u64;
    let d = a + total as u64;
    [a..b, b..c, c..d]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::relation_rule;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            width: 64,
            height: 64,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = synth_scene(11, &small()).unwrap();
        let b = synth_scene(11, &small()).unwrap();
        assert_eq!(a, b);
        let c = synth_scene(12, &small()).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn all_absent() {
        let cfg = GeneratorConfig {
            scene_override: SceneOverride::AllAbsent,
            ..small()
        };
        let r = synth_scene(3, &cfg).unwrap();
        assert_eq!(r.cvs, [0, 0, 0]);
        assert!(r.objects.is_empty());
        assert!(r.relations.is_empty());
    }

    #[test]
    fn canonical_full_scene_meets_every_criterion() {
        for size in [64, 128] {
            let cfg = GeneratorConfig {
                width: size,
                height: size,
                scene_override: SceneOverride::CanonicalFull,
                ..Default::default()
            };
            for seed in 0..5 {
                let r = synth_scene(seed, &cfg).unwrap();
                assert_eq!(r.cvs, [1, 1, 1], "size {size} seed {seed}");
                for c in [GALLBLADDER, DUCT, ARTERY, TRIANGLE, PLATE] {
                    assert!(r.objects.iter().any(|o| o.class_id == c));
                }
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = GeneratorConfig {
            width: 10,
            ..Default::default()
        };
        assert!(matches!(synth_scene(0, &cfg), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            p_duct: 1.5,
            ..Default::default()
        };
        assert!(synth_scene(0, &cfg).is_err());
    }

    #[test]
    fn relations_match_rule() {
        for seed in 0..30 {
            let r = synth_scene(seed, &small()).unwrap();
            for rel in &r.relations {
                assert!(rel.i < rel.j);
                let expect = relation_rule(&r.objects[rel.i].bbox, &r.objects[rel.j].bbox);
                assert_eq!(rel.class, expect);
            }
        }
    }

    #[test]
    fn split_is_60_20_20() {
        let [a, b, c] = split_ranges(100, 50);
        assert_eq!((a.start, a.end, b.end, c.end), (100, 130, 140, 150));
    }
}
