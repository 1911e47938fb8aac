//! The latent graph encoder: nodes from detections, learned edge proposal,
//! union-box edge features, triplet message passing and edge classification.

mod gnn;
mod graph;
mod relpn;

use base64::Engine;
use candle_core::{DType, Module, Result as TResult, Tensor};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, RelationClass};
use crate::nn::Mlp;
use crate::perception::{DetectionSet, FeatureMap};
use crate::scenegen::NUM_CLASSES;

pub use gnn::{GraphNorm, Topology, TripletGnn, GRAPH_NORM_EPS};
pub use graph::{
    box_tensor as box_tensor_for, init_edges, init_nodes, init_nodes_sized, match_edges_to_gt, random_edges, sample_edges, EdgeSet, NodeSet,
};
pub use relpn::RelPn;

/// Number of edge classes, including class 0 for "no relation".
pub const EDGE_CLASSES: usize = RelationClass::COUNT;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Node and edge feature size (the backbone output size).
    pub features: usize,
    /// Hidden size of the edge scorer and edge classifier.
    pub hidden: usize,
    pub gnn_layers: usize,
    pub edges_per_node: usize,
    pub pool_grid: usize,
    /// Learned edge proposal; when off, partners are drawn at random.
    pub edge_proposal: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            features: 64,
            hidden: 64,
            gnn_layers: 2,
            edges_per_node: 4,
            pool_grid: crate::perception::DEFAULT_POOL_GRID,
            edge_proposal: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 || self.hidden == 0 || self.pool_grid == 0 || self.edges_per_node == 0 {
            return Err(Error::Config(
                "encoder sizes, pool grid and edges per node must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Edge classifier: two-layer perceptron to [`EDGE_CLASSES`] logits.
#[derive(Debug, Clone)]
pub struct EdgeClassifier {
    mlp: Mlp,
}

impl EdgeClassifier {
    pub fn new(features: usize, hidden: usize, vb: VarBuilder) -> TResult<Self> {
        Ok(Self {
            mlp: Mlp::new(features, hidden, EDGE_CLASSES, vb)?,
        })
    }

    pub fn forward(&self, edge_features: &Tensor) -> TResult<Tensor> {
        if edge_features.dims()[0] == 0 {
            return Tensor::zeros((0, EDGE_CLASSES), edge_features.dtype(), edge_features.device());
        }
        self.mlp.forward(edge_features)
    }
}

/// Batched latent graph: nodes and edges carry boxes, class information and
/// message-passed features.
#[derive(Debug, Clone)]
pub struct LatentGraphBatch {
    pub nodes: NodeSet,
    pub edges: EdgeSet,
    /// `(m, EDGE_CLASSES)`.
    pub edge_logits: Tensor,
}

/// Bundles the encoder outputs into a [`LatentGraphBatch`].
pub fn assemble_latent_graph(
    nodes: &NodeSet,
    edges: &EdgeSet,
    node_features: Tensor,
    edge_features: Tensor,
    edge_logits: Tensor,
) -> Result<LatentGraphBatch> {
    if node_features.dims()[0] != nodes.len() || edge_features.dims()[0] != edges.len() {
        return Err(Error::Shape("feature rows do not match node/edge counts".into()));
    }
    if edge_logits.dims() != [edges.len(), EDGE_CLASSES] {
        return Err(Error::Shape(format!("edge logits have shape {:?}", edge_logits.dims())));
    }
    Ok(LatentGraphBatch {
        nodes: nodes.with_features(node_features),
        edges: edges.with_features(edge_features),
        edge_logits,
    })
}

impl LatentGraphBatch {
    /// Per-image graphs with local node indices.
    pub fn to_graphs(&self) -> Result<Vec<LatentGraph>> {
        let nf = rows_f32(&self.nodes.features)?;
        let ef = rows_f32(&self.edges.features)?;
        let el = rows_f64(&self.edge_logits)?;
        let ranges = self.nodes.graph_ranges();
        let mut out: Vec<LatentGraph> = ranges
            .iter()
            .map(|r| LatentGraph {
                nodes: r
                    .clone()
                    .map(|k| LatentNode {
                        bbox: self.nodes.boxes[k].to_array(),
                        class_probs: self.nodes.class_probs[k].clone(),
                        feature: nf[k].clone(),
                    })
                    .collect(),
                edges: Vec::new(),
            })
            .collect();
        for (e, &(i, j)) in self.edges.pairs.iter().enumerate() {
            let g = self.nodes.graph[i];
            let o = ranges[g].start;
            out[g].edges.push(LatentEdge {
                i: i - o,
                j: j - o,
                bbox: self.edges.boxes[e].to_array(),
                class_logits: el[e].clone(),
                feature: ef[e].clone(),
            });
        }
        Ok(out)
    }
}

fn rows_f32(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    if t.dims()[0] == 0 {
        return Ok(Vec::new());
    }
    Ok(t.to_dtype(DType::F32)?.to_vec2()?)
}

fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    if t.dims()[0] == 0 {
        return Ok(Vec::new());
    }
    Ok(t.to_dtype(DType::F64)?.to_vec2()?)
}

mod b64_f32 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f32], s: S) -> Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f32>, D::Error> {
        let text = String::deserialize(d)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(text)
            .map_err(serde::de::Error::custom)?;
        if bytes.len() % 4 != 0 {
            return Err(serde::de::Error::custom("feature byte length is not a multiple of 4"));
        }
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentNode {
    pub bbox: [f64; 4],
    pub class_probs: Vec<f64>,
    #[serde(with = "b64_f32")]
    pub feature: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentEdge {
    pub i: usize,
    pub j: usize,
    pub bbox: [f64; 4],
    pub class_logits: Vec<f64>,
    #[serde(with = "b64_f32")]
    pub feature: Vec<f32>,
}

/// One image's latent graph in plain data form, for dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LatentGraph {
    pub nodes: Vec<LatentNode>,
    pub edges: Vec<LatentEdge>,
}

impl LatentGraph {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn edge_classes(&self) -> Vec<usize> {
        self.edges
            .iter()
            .map(|e| {
                e.class_logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map_or(0, |(k, _)| k)
            })
            .collect()
    }
}

/// Output of one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub graph: LatentGraphBatch,
    /// Proposal logits of the selected edges, `(m,)`; absent without
    /// learned proposal.
    pub edge_scores: Option<Tensor>,
}

/// Edge scorer, message passing and edge classifier.
#[derive(Debug, Clone)]
pub struct LatentGraphEncoder {
    config: EncoderConfig,
    relpn: RelPn,
    gnn: TripletGnn,
    edge_classifier: EdgeClassifier,
}

impl LatentGraphEncoder {
    /// Parameters live under `relpn.*`, `lg_gnn.*` and `edge_cls.*` of `vb`.
    pub fn new(config: EncoderConfig, vb: VarBuilder) -> Result<Self> {
        config.validate()?;
        let descriptor = config.features + NUM_CLASSES + 4;
        Ok(Self {
            relpn: RelPn::new(descriptor, config.hidden, vb.pp("relpn"))?,
            gnn: TripletGnn::new(config.features, config.gnn_layers, vb.pp("lg_gnn"))?,
            edge_classifier: EdgeClassifier::new(config.features, config.hidden, vb.pp("edge_cls"))?,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn relpn(&self) -> &RelPn {
        &self.relpn
    }

    /// Selected stacked-node edges and, with learned proposal, their logits.
    pub fn propose(&self, nodes: &NodeSet, edge_seed: u64) -> Result<(Vec<(usize, usize)>, Option<Tensor>)> {
        let e = self.config.edges_per_node;
        let ranges = nodes.graph_ranges();
        if !self.config.edge_proposal {
            let mut pairs = Vec::new();
            for (g, r) in ranges.iter().enumerate() {
                let seed = edge_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(g as u64);
                pairs.extend(random_edges(r.len(), e, seed).into_iter().map(|(i, j)| (i + r.start, j + r.start)));
            }
            return Ok((pairs, None));
        }
        let (all, logits) = self.relpn.all_pair_logits(nodes)?;
        if all.is_empty() {
            return Ok((Vec::new(), Some(logits)));
        }
        let values: Vec<f64> = logits.to_dtype(DType::F64)?.to_vec1()?;
        let mats = relpn::score_matrices_from(nodes, &all, &values);
        let mut pairs = Vec::new();
        for (g, r) in ranges.iter().enumerate() {
            pairs.extend(
                sample_edges(&mats[g], e)
                    .into_iter()
                    .map(|(i, j)| (i + r.start, j + r.start)),
            );
        }
        // `all` lists pairs in the same sorted order, so positions can be found
        // by binary search.
        let idx: Vec<u32> = pairs
            .iter()
            .map(|p| all.binary_search(p).expect("selected pairs come from the pair list") as u32)
            .collect();
        let idx = Tensor::from_vec(idx, pairs.len(), logits.device())?;
        let selected = if pairs.is_empty() {
            Tensor::zeros(0, logits.dtype(), logits.device())?
        } else {
            logits.index_select(&idx, 0)?
        };
        Ok((pairs, Some(selected)))
    }

    /// Full pass from a feature map and per-image detections.
    pub fn forward(
        &self,
        fm: &FeatureMap,
        detections: &[DetectionSet],
        image_size: (usize, usize),
        edge_seed: u64,
    ) -> Result<EncoderOutput> {
        if fm.batch() != detections.len() {
            return Err(Error::Shape(format!(
                "feature map batch {} differs from {} detection sets",
                fm.batch(),
                detections.len()
            )));
        }
        let nodes = init_nodes_sized(detections, fm, self.config.pool_grid, image_size)?;
        let (pairs, edge_scores) = self.propose(&nodes, edge_seed)?;
        let edges = init_edges(&nodes, &pairs, fm, self.config.pool_grid)?;
        let (h, e) = self.message_pass(&nodes, &edges)?;
        let logits = self.edge_classifier.forward(&e)?;
        Ok(EncoderOutput {
            graph: assemble_latent_graph(&nodes, &edges, h, e, logits)?,
            edge_scores,
        })
    }

    pub fn message_pass(&self, nodes: &NodeSet, edges: &EdgeSet) -> Result<(Tensor, Tensor)> {
        let topo = Topology::new(
            &nodes.graph,
            nodes.num_graphs,
            &edges.pairs,
            nodes.features.dtype(),
            nodes.features.device(),
        )?;
        Ok(self.gnn.forward(&nodes.features, &edges.features, &topo)?)
    }

    pub fn classify_edges(&self, edge_features: &Tensor) -> Result<Tensor> {
        Ok(self.edge_classifier.forward(edge_features)?)
    }
}

/// Box of every edge in a batch graph, for ground-truth matching.
pub fn edge_boxes_per_graph(graph: &LatentGraphBatch) -> Vec<Vec<(usize, BBox)>> {
    let mut out = vec![Vec::new(); graph.nodes.num_graphs];
    for (e, &(i, _)) in graph.edges.pairs.iter().enumerate() {
        out[graph.nodes.graph[i]].push((e, graph.edges.boxes[e]));
    }
    out
}

/// Base64 of little-endian `f32` values, as used in graph dumps.
pub fn encode_features(values: &[f32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::perception::{oracle_detect, CorruptionConfig};
    use crate::scenegen::{synth_scene, GeneratorConfig};
    use candle_core::Device;
    use candle_nn::VarMap;

    fn encoder(proposal: bool) -> (VarMap, LatentGraphEncoder) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        let cfg = EncoderConfig {
            edge_proposal: proposal,
            ..Default::default()
        };
        let e = LatentGraphEncoder::new(cfg, vb).unwrap();
        (vm, e)
    }

    fn batch() -> (FeatureMap, Vec<DetectionSet>) {
        let gen = GeneratorConfig {
            width: 64,
            height: 64,
            ..Default::default()
        };
        let dets: Vec<DetectionSet> = (0..3)
            .map(|s| oracle_detect(&synth_scene(s, &gen).unwrap(), &CorruptionConfig::default(), s))
            .chain(std::iter::once(DetectionSet::default()))
            .collect();
        let fm = FeatureMap {
            tensor: Tensor::randn(0f32, 1.0, (4, 8, 8, 64), &Device::Cpu).unwrap(),
            stride: 8,
        };
        (fm, dets)
    }

    #[test]
    fn forward_shapes_and_round_trip() {
        for proposal in [true, false] {
            let (_vm, enc) = encoder(proposal);
            let (fm, dets) = batch();
            let out = enc.forward(&fm, &dets, (64, 64), 0).unwrap();
            let g = &out.graph;
            let n: usize = dets.iter().map(DetectionSet::len).sum();
            assert_eq!(g.nodes.features.dims(), &[n, 64]);
            assert_eq!(g.edges.features.dims(), &[g.edges.len(), 64]);
            assert_eq!(g.edge_logits.dims(), &[g.edges.len(), EDGE_CLASSES]);
            assert_eq!(out.edge_scores.is_some(), proposal);
            let graphs = g.to_graphs().unwrap();
            assert_eq!(graphs.len(), 4);
            assert!(graphs[3].nodes.is_empty() && graphs[3].edges.is_empty());
            for lg in &graphs {
                let back = LatentGraph::from_json(&lg.to_json().unwrap()).unwrap();
                assert_eq!(&back, lg);
                for e in &lg.edges {
                    assert!(e.i < e.j && e.j < lg.nodes.len());
                }
            }
        }
    }

    #[test]
    fn empty_batch_passes_through() {
        let (_vm, enc) = encoder(true);
        let fm = FeatureMap {
            tensor: Tensor::zeros((1, 8, 8, 64), DType::F32, &Device::Cpu).unwrap(),
            stride: 8,
        };
        let out = enc.forward(&fm, &[DetectionSet::default()], (64, 64), 0).unwrap();
        assert!(out.graph.nodes.is_empty() && out.graph.edges.is_empty());
        assert_eq!(out.graph.to_graphs().unwrap(), vec![LatentGraph::default()]);
    }

    #[test]
    fn assemble_keeps_fields() {
        let (_vm, enc) = encoder(true);
        let (fm, dets) = batch();
        let nodes = init_nodes(&dets, &fm, 7).unwrap();
        let (pairs, _) = enc.propose(&nodes, 0).unwrap();
        let edges = init_edges(&nodes, &pairs, &fm, 7).unwrap();
        let logits = Tensor::zeros((edges.len(), EDGE_CLASSES), DType::F32, &Device::Cpu).unwrap();
        let g = assemble_latent_graph(&nodes, &edges, nodes.features.clone(), edges.features.clone(), logits).unwrap();
        assert_eq!(g.nodes.boxes, nodes.boxes);
        assert_eq!(g.nodes.class_probs, nodes.class_probs);
        assert_eq!(g.edges.pairs, edges.pairs);
        assert_eq!(g.edges.boxes, edges.boxes);
        let bad = Tensor::zeros((edges.len(), 3), DType::F32, &Device::Cpu).unwrap();
        assert!(assemble_latent_graph(&nodes, &edges, nodes.features.clone(), edges.features.clone(), bad).is_err());
    }

    #[test]
    fn edge_classifier_properties() {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let c = EdgeClassifier::new(8, 16, vb).unwrap();
        let x = Tensor::randn(0f64, 1.0, (5, 8), &Device::Cpu).unwrap();
        let logits = c.forward(&x).unwrap();
        assert_eq!(logits.dims(), &[5, EDGE_CLASSES]);
        let shifted = (&logits + 3.5).unwrap();
        assert_eq!(
            logits.argmax(1).unwrap().to_vec1::<u32>().unwrap(),
            shifted.argmax(1).unwrap().to_vec1::<u32>().unwrap()
        );
        for (name, var) in vm.data().lock().unwrap().iter() {
            if name.starts_with("1.") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let flat: Vec<f64> = c.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(flat.iter().all(|&v| v == 0.0));
    }
}
