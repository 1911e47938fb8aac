//! Node and edge sets, edge selection and ground-truth matching.

use std::collections::BTreeSet;
use std::ops::Range;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::geometry::{giou, union_box, BBox};
use crate::perception::{pool_regions, DetectionSet, FeatureMap};
use crate::scenegen::Relation;

/// Nodes of a batch of graphs, stacked graph by graph.
#[derive(Debug, Clone)]
pub struct NodeSet {
    pub boxes: Vec<BBox>,
    pub class_probs: Vec<Vec<f64>>,
    /// Graph (image) index of every node; non-decreasing.
    pub graph: Vec<usize>,
    /// `(n, F)`.
    pub features: Tensor,
    pub num_graphs: usize,
    /// `(width, height)` of the images.
    pub image_size: (usize, usize),
}

impl NodeSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Stacked node range of every graph.
    pub fn graph_ranges(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.num_graphs);
        let mut start = 0;
        for g in 0..self.num_graphs {
            let mut end = start;
            while end < self.graph.len() && self.graph[end] == g {
                end += 1;
            }
            out.push(start..end);
            start = end;
        }
        out
    }

    /// Boxes scaled to `[0, 1]`, `(n, 4)`.
    pub fn box_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        box_tensor(&self.boxes, self.image_size, dtype, device)
    }

    /// `(n, C)`.
    pub fn prob_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let c = self.class_probs.first().map_or(crate::scenegen::NUM_CLASSES, Vec::len);
        let flat: Vec<f64> = self.class_probs.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (self.len(), c), device)?.to_dtype(dtype)?)
    }

    /// Same nodes with replaced features.
    pub fn with_features(&self, features: Tensor) -> Self {
        Self {
            features,
            ..self.clone()
        }
    }
}

/// Boxes scaled to `[0, 1]` by the image size, `(n, 4)`.
pub fn box_tensor(boxes: &[BBox], size: (usize, usize), dtype: DType, device: &Device) -> Result<Tensor> {
    let flat: Vec<f64> = boxes
        .iter()
        .flat_map(|b| b.normalized(size.0 as f64, size.1 as f64))
        .collect();
    Ok(Tensor::from_vec(flat, (boxes.len(), 4), device)?.to_dtype(dtype)?)
}

/// Edges between stacked nodes.
#[derive(Debug, Clone)]
pub struct EdgeSet {
    /// Stacked node indices with `i < j`, both in the same graph.
    pub pairs: Vec<(usize, usize)>,
    pub boxes: Vec<BBox>,
    /// `(m, F)`.
    pub features: Tensor,
}

impl EdgeSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn with_features(&self, features: Tensor) -> Self {
        Self {
            features,
            ..self.clone()
        }
    }
}

/// Nodes from per-image detections with features pooled from `fm`.
pub fn init_nodes(detections: &[DetectionSet], fm: &FeatureMap, grid: usize) -> Result<NodeSet> {
    let image_size = (fm.grid().1 * fm.stride, fm.grid().0 * fm.stride);
    init_nodes_sized(detections, fm, grid, image_size)
}

pub fn init_nodes_sized(
    detections: &[DetectionSet],
    fm: &FeatureMap,
    grid: usize,
    image_size: (usize, usize),
) -> Result<NodeSet> {
    let mut boxes = Vec::new();
    let mut class_probs = Vec::new();
    let mut graph = Vec::new();
    for (g, det) in detections.iter().enumerate() {
        for d in &det.items {
            boxes.push(d.bbox.clip(image_size.0 as f64, image_size.1 as f64));
            class_probs.push(d.class_probs.clone());
            graph.push(g);
        }
    }
    let regions: Vec<(usize, BBox)> = graph.iter().copied().zip(boxes.iter().copied()).collect();
    let features = pool_regions(fm, &regions, grid)?;
    Ok(NodeSet {
        boxes,
        class_probs,
        graph,
        features,
        num_graphs: detections.len(),
        image_size,
    })
}

/// Per node, its `edges_per_node` best partners by `scores[i][j]` (ties to
/// the lower partner index), merged into a sorted, duplicate-free list of
/// `(i, j)` with `i < j`. Diagonal entries are ignored.
pub fn sample_edges(scores: &[Vec<f64>], edges_per_node: usize) -> Vec<(usize, usize)> {
    let n = scores.len();
    let mut out = BTreeSet::new();
    for (i, row) in scores.iter().enumerate() {
        let mut partners: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        partners.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in partners.iter().take(edges_per_node) {
            out.insert((i.min(j), i.max(j)));
        }
    }
    out.into_iter().collect()
}

/// Per node, `edges_per_node` partners drawn uniformly without replacement.
pub fn random_edges(n: usize, edges_per_node: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeSet::new();
    if n < 2 {
        return Vec::new();
    }
    let k = edges_per_node.min(n - 1);
    for i in 0..n {
        for pick in sample(&mut rng, n - 1, k) {
            let j = if pick >= i { pick + 1 } else { pick };
            out.insert((i.min(j), i.max(j)));
        }
    }
    out.into_iter().collect()
}

/// Edges with union boxes and features pooled over the union box.
pub fn init_edges(nodes: &NodeSet, pairs: &[(usize, usize)], fm: &FeatureMap, grid: usize) -> Result<EdgeSet> {
    let boxes: Vec<BBox> = pairs
        .iter()
        .map(|&(i, j)| union_box(&nodes.boxes[i], &nodes.boxes[j]))
        .collect();
    let regions: Vec<(usize, BBox)> = pairs
        .iter()
        .zip(&boxes)
        .map(|(&(i, _), b)| (nodes.graph[i], *b))
        .collect();
    let features = pool_regions(fm, &regions, grid)?;
    Ok(EdgeSet {
        pairs: pairs.to_vec(),
        boxes,
        features,
    })
}

/// Presence and class target of every predicted edge box: the ground-truth
/// relation whose union box has the highest gIoU wins when that gIoU is at
/// least 0.5 (earlier relation on ties); otherwise `(0, 0)`.
pub fn match_edges_to_gt(edge_boxes: &[BBox], gt_relations: &[Relation], gt_boxes: &[BBox]) -> Vec<(u8, usize)> {
    let gt_union: Vec<BBox> = gt_relations
        .iter()
        .map(|r| union_box(&gt_boxes[r.i], &gt_boxes[r.j]))
        .collect();
    edge_boxes
        .iter()
        .map(|b| {
            let mut best: Option<(f64, usize)> = None;
            for (k, u) in gt_union.iter().enumerate() {
                let g = giou(b, u);
                if best.map_or(true, |(bg, _)| g > bg) {
                    best = Some((g, k));
                }
            }
            match best {
                Some((g, k)) if g >= 0.5 => (1, gt_relations[k].class.id()),
                _ => (0, 0),
            }
        })
        .collect()
}
