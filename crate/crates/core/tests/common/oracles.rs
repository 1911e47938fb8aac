//! Brute-force reference implementations, written independently of the
//! library so the two can be compared.

use latent_graph::geometry::{BBox, BinaryMask};

/// Closed-form gIoU from raw coordinates.
pub fn giou_closed_form(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]) * (r[3] - r[1]);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

/// IoU by counting the cells of a raster `scale` times finer than the unit
/// grid whose centres fall in each box.
pub fn iou_by_pixels(a: [f64; 4], b: [f64; 4], scale: f64) -> f64 {
    let x0 = a[0].min(b[0]);
    let y0 = a[1].min(b[1]);
    let nx = ((a[2].max(b[2]) - x0) * scale).ceil() as usize;
    let ny = ((a[3].max(b[3]) - y0) * scale).ceil() as usize;
    let inside = |r: [f64; 4], x: f64, y: f64| r[0] <= x && x < r[2] && r[1] <= y && y < r[3];
    let (mut inter, mut union) = (0u64, 0u64);
    for j in 0..ny {
        let y = y0 + (j as f64 + 0.5) / scale;
        for i in 0..nx {
            let x = x0 + (i as f64 + 0.5) / scale;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pixel raster of a box on an integer grid, one `Vec<bool>` row per line.
pub fn box_raster(b: [f64; 4], width: usize, height: usize) -> Vec<Vec<bool>> {
    (0..height)
        .map(|y| {
            (0..width)
                .map(|x| {
                    let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
                    b[0] <= cx && cx < b[2] && b[1] <= cy && cy < b[3]
                })
                .collect()
        })
        .collect()
}

/// Enclosing box of the set cells found by scanning rows and columns.
pub fn scan_box(rows: &[Vec<bool>]) -> Option<[f64; 4]> {
    let occupied_rows: Vec<usize> = (0..rows.len()).filter(|&y| rows[y].iter().any(|&v| v)).collect();
    let width = rows.first().map_or(0, |r| r.len());
    let occupied_cols: Vec<usize> = (0..width).filter(|&x| rows.iter().any(|r| r[x])).collect();
    Some([
        *occupied_cols.first()? as f64,
        *occupied_rows.first()? as f64,
        (*occupied_cols.last()? + 1) as f64,
        (*occupied_rows.last()? + 1) as f64,
    ])
}

pub fn mask_rows(m: &BinaryMask) -> Vec<Vec<bool>> {
    (0..m.height()).map(|y| (0..m.width()).map(|x| m.get(x, y)).collect()).collect()
}

pub fn coords(b: &BBox) -> [f64; 4] {
    [b.x1, b.y1, b.x2, b.y2]
}

/// Per-pixel occupancy: `out[y][x][c]` is 1 when pixel `(x, y)` has its
/// centre in box `c`.
pub fn layout_by_pixels(boxes: &[[f64; 4]], width: usize, height: usize, channels: usize) -> Vec<Vec<Vec<f32>>> {
    let mut out = vec![vec![vec![0.0; channels]; width]; height];
    for (c, b) in boxes.iter().enumerate() {
        for (y, row) in box_raster(*b, width, height).iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                if v {
                    out[y][x][c] = 1.0;
                }
            }
        }
    }
    out
}

/// Undirected edge set in which `{i, j}` is kept when either endpoint
/// ranks the other among its `e` best partners. A partner's rank is the
/// number of partners that beat it: higher score, or equal score and lower
/// index.
pub fn edges_by_rank(scores: &[Vec<f64>], e: usize) -> Vec<(usize, usize)> {
    let n = scores.len();
    let rank = |i: usize, j: usize| {
        (0..n)
            .filter(|&k| k != i && k != j)
            .filter(|&k| scores[i][k] > scores[i][j] || (scores[i][k] == scores[i][j] && k < j))
            .count()
    };
    let mut out = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rank(i, j) < e || rank(j, i) < e {
                out.push((i, j));
            }
        }
    }
    out
}

/// Average precision as the mean, over positives, of the fraction of
/// positives among all items ranked at or above it. Ranking is by
/// descending score with ties in input order.
pub fn average_precision_by_positions(scores: &[f64], labels: &[u8]) -> f64 {
    let n = scores.len();
    let ahead = |i: usize, k: usize| scores[k] > scores[i] || (scores[k] == scores[i] && k < i);
    let mut sum = 0.0;
    let mut positives = 0;
    for i in (0..n).filter(|&i| labels[i] == 1) {
        let position = (0..n).filter(|&k| ahead(i, k)).count() + 1;
        let hits = (0..n).filter(|&k| labels[k] == 1 && (k == i || ahead(i, k))).count();
        sum += hits as f64 / position as f64;
        positives += 1;
    }
    sum / positives as f64
}
