use std::collections::BTreeSet;

use crate::geometry::{connected_components, giou, relation_rule, tight_box, BinaryMask};

use super::{ObjectClassSet, Relation, SceneObject};

/// Instance boxes from a semantic class raster.
///
/// Each foreground class is split into 4-connected components and every
/// component yields one `(box, class, mask)` entry. Touching instances of
/// the same class therefore collapse into a single box. Output is ordered by
/// class id, then by component area.
pub fn boxes_from_semantic_mask(
    semantic: &[u8],
    width: usize,
    height: usize,
    classes: &ObjectClassSet,
) -> Vec<SceneObject> {
    assert_eq!(semantic.len(), width * height, "semantic raster size");
    let mut out = Vec::new();
    for class_id in 1..classes.len() {
        let data: Vec<bool> = semantic.iter().map(|&c| c as usize == class_id).collect();
        if !data.iter().any(|&v| v) {
            continue;
        }
        let mask = BinaryMask::from_vec(width, height, data).expect("raster size checked");
        for component in connected_components(&mask) {
            let bbox = tight_box(&component).expect("components are non-empty");
            out.push(SceneObject {
                bbox,
                class_id,
                mask: component,
            });
        }
    }
    out
}

/// Per-node top-`edges_per_node` partners by gIoU (ties to the lower
/// index), merged into a duplicate-free undirected edge list labelled by
/// [`relation_rule`].
pub fn build_gt_scene_graph(objects: &[SceneObject], edges_per_node: usize) -> Vec<Relation> {
    let n = objects.len();
    let mut edges = BTreeSet::new();
    for i in 0..n {
        let mut partners: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, giou(&objects[i].bbox, &objects[j].bbox)))
            .collect();
        partners.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for &(j, _) in partners.iter().take(edges_per_node) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges
        .into_iter()
        .map(|(i, j)| Relation {
            i,
            j,
            class: relation_rule(&objects[i].bbox, &objects[j].bbox),
        })
        .collect()
}
