//! JSON-lines dataset files with PNG images and run-length encoded masks.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, BinaryMask, RelationClass};

use super::{Relation, RgbImage, SceneObject, SceneRecord};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Segmentation {
    counts: String,
    size: [usize; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ObjectLine {
    bbox: [f64; 4],
    category_id: usize,
    segmentation: Segmentation,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    image: String,
    width: usize,
    height: usize,
    objects: Vec<ObjectLine>,
    relations: Vec<[usize; 3]>,
    cvs: [u8; 3],
}

/// Row-major run lengths, alternating zeros and ones, starting with zeros.
pub fn encode_rle(mask: &BinaryMask) -> String {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &v in mask.as_slice() {
        if v == current {
            len += 1;
        } else {
            runs.push(len);
            current = v;
            len = 1;
        }
    }
    runs.push(len);
    runs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn decode_rle(counts: &str, width: usize, height: usize) -> std::result::Result<BinaryMask, String> {
    let mut data = Vec::with_capacity(width * height);
    let mut value = false;
    for tok in counts.split_whitespace() {
        let n: usize = tok.parse().map_err(|_| format!("bad run length {tok:?}"))?;
        data.extend(std::iter::repeat(value).take(n));
        value = !value;
    }
    if data.len() != width * height {
        return Err(format!("runs cover {} pixels, expected {}", data.len(), width * height));
    }
    BinaryMask::from_vec(width, height, data).map_err(|e| e.to_string())
}

fn image_dir_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    format!("{stem}_images")
}

fn save_png(image: &RgbImage, path: &Path) -> Result<()> {
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

pub(crate) fn load_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage {
        width: w as usize,
        height: h as usize,
        data: img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(),
    })
}

/// Writes `records` to the JSON-lines file at `path`; images go to a
/// sibling directory named after the file stem.
pub fn write_dataset(records: &[SceneRecord], path: &Path) -> Result<()> {
    let parent = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let dir_name = image_dir_name(path);
    let image_dir = parent.join(&dir_name);
    if !records.is_empty() {
        fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (idx, rec) in records.iter().enumerate() {
        let rel = format!("{dir_name}/{idx:06}.png");
        save_png(&rec.image, &parent.join(&rel))?;
        let line = RecordLine {
            image: rel,
            width: rec.width(),
            height: rec.height(),
            objects: rec
                .objects
                .iter()
                .map(|o| ObjectLine {
                    bbox: o.bbox.to_array(),
                    category_id: o.class_id,
                    segmentation: Segmentation {
                        counts: encode_rle(&o.mask),
                        size: [o.mask.height(), o.mask.width()],
                    },
                })
                .collect(),
            relations: rec.relations.iter().map(|r| [r.i, r.j, r.class.id()]).collect(),
            cvs: rec.cvs,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<SceneRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let parent: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let lineno = k + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let rl: RecordLine = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        let image = load_png(&parent.join(&rl.image))?;
        if image.width != rl.width || image.height != rl.height {
            return Err(perr(format!(
                "image is {}x{}, record says {}x{}",
                image.width, image.height, rl.width, rl.height
            )));
        }
        let mut objects = Vec::with_capacity(rl.objects.len());
        for o in rl.objects {
            let [x1, y1, x2, y2] = o.bbox;
            let bbox = BBox::new(x1, y1, x2, y2).map_err(|e| perr(e.to_string()))?;
            let [h, w] = o.segmentation.size;
            if (w, h) != (rl.width, rl.height) {
                return Err(perr("mask size differs from image size".into()));
            }
            let mask = decode_rle(&o.segmentation.counts, w, h).map_err(perr)?;
            objects.push(SceneObject {
                bbox,
                class_id: o.category_id,
                mask,
            });
        }
        let mut relations = Vec::with_capacity(rl.relations.len());
        for [i, j, c] in rl.relations {
            if i >= objects.len() || j >= objects.len() || i >= j {
                return Err(perr(format!("relation ({i}, {j}) does not reference an ordered object pair")));
            }
            let class = RelationClass::from_id(c).map_err(|e| perr(e.to_string()))?;
            relations.push(Relation { i, j, class });
        }
        if rl.cvs.iter().any(|&b| b > 1) {
            return Err(perr("cvs entries must be 0 or 1".into()));
        }
        records.push(SceneRecord {
            image,
            objects,
            relations,
            cvs: rl.cvs,
        });
    }
    Ok(records)
}
