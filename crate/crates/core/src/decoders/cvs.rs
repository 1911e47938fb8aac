//! Graph-level criteria classifier over the latent graph.

use candle_core::{Module, Result as TResult, Tensor, D};
use candle_nn::{linear, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::latentgraph::{box_tensor_for, LatentGraphBatch, Topology, TripletGnn, EDGE_CLASSES};
use crate::nn::softmax_last;
use crate::scenegen::NUM_CLASSES;

/// Number of criteria predicted per image.
pub const NUM_CRITERIA: usize = 3;

/// Which latent graph components the classifier sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Components {
    pub visual: bool,
    pub boxes: bool,
    pub classes: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self {
            visual: true,
            boxes: true,
            classes: true,
        }
    }
}

impl Components {
    pub fn validate(&self) -> Result<()> {
        if !(self.visual || self.boxes || self.classes) {
            return Err(Error::Config(
                "at least one of visual features, boxes or class probabilities must be enabled".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvsDecoderConfig {
    /// Latent graph feature size.
    pub features: usize,
    /// Node feature bottleneck size.
    pub node_bottleneck: usize,
    /// Edge feature bottleneck size.
    pub edge_bottleneck: usize,
    /// Message passing width.
    pub hidden: usize,
    pub gnn_layers: usize,
    pub components: Components,
}

impl Default for CvsDecoderConfig {
    fn default() -> Self {
        Self {
            features: 64,
            node_bottleneck: 64,
            edge_bottleneck: 64,
            hidden: 64,
            gnn_layers: 2,
            components: Components::default(),
        }
    }
}

impl CvsDecoderConfig {
    fn node_input(&self) -> usize {
        let c = self.components;
        (if c.visual { self.node_bottleneck } else { 0 }) + (if c.boxes { 4 } else { 0 }) + (if c.classes { NUM_CLASSES } else { 0 })
    }

    fn edge_input(&self) -> usize {
        let c = self.components;
        (if c.visual { self.edge_bottleneck } else { 0 })
            + (if c.boxes { 4 } else { 0 })
            + (if c.classes { EDGE_CLASSES } else { 0 })
    }
}

/// Bottlenecks, input projections, a triplet GNN, mean pooling and a linear
/// head. Images without nodes use a learned embedding in place of the pool.
#[derive(Debug, Clone)]
pub struct CvsDecoder {
    config: CvsDecoderConfig,
    node_bottleneck: Linear,
    edge_bottleneck: Linear,
    node_in: Linear,
    edge_in: Linear,
    gnn: TripletGnn,
    empty: Tensor,
    head: Linear,
}

/// Box coordinates to use for nodes and edges in place of the graph's own.
#[derive(Debug, Clone, Copy)]
pub struct BoxOverride<'a> {
    pub nodes: &'a [BBox],
    pub edges: &'a [BBox],
}

impl CvsDecoder {
    pub fn new(config: CvsDecoderConfig, vb: VarBuilder) -> Result<Self> {
        config.components.validate()?;
        let d = config.hidden;
        Ok(Self {
            node_bottleneck: linear(config.features, config.node_bottleneck, vb.pp("node_bottleneck"))?,
            edge_bottleneck: linear(config.features, config.edge_bottleneck, vb.pp("edge_bottleneck"))?,
            node_in: linear(config.node_input(), d, vb.pp("node_in"))?,
            edge_in: linear(config.edge_input(), d, vb.pp("edge_in"))?,
            gnn: TripletGnn::new(d, config.gnn_layers, vb.pp("gnn"))?,
            empty: vb.get_with_hints(d, "empty", candle_nn::Init::Const(0.0))?,
            head: linear(d, NUM_CRITERIA, vb.pp("head"))?,
            config,
        })
    }

    pub fn config(&self) -> &CvsDecoderConfig {
        &self.config
    }

    /// `(B, 3)` criteria logits.
    pub fn forward(&self, graph: &LatentGraphBatch, boxes: Option<BoxOverride>) -> Result<Tensor> {
        let nodes = &graph.nodes;
        let edges = &graph.edges;
        let dtype = nodes.features.dtype();
        let dev = nodes.features.device().clone();
        let b = nodes.num_graphs;
        let c = self.config.components;
        let (node_boxes, edge_boxes) = match boxes {
            Some(o) => {
                if o.nodes.len() != nodes.len() || o.edges.len() != edges.len() {
                    return Err(Error::Shape("box override does not match the graph".into()));
                }
                (o.nodes, o.edges)
            }
            None => (&nodes.boxes[..], &edges.boxes[..]),
        };
        let topo = Topology::new(&nodes.graph, b, &edges.pairs, dtype, &dev)?;
        let mut pooled = Tensor::zeros((b, self.config.hidden), dtype, &dev)?;
        if !nodes.is_empty() {
            let mut parts = Vec::new();
            if c.visual {
                parts.push(self.node_bottleneck.forward(&nodes.features)?);
            }
            if c.boxes {
                parts.push(box_tensor_for(node_boxes, nodes.image_size, dtype, &dev)?);
            }
            if c.classes {
                parts.push(nodes.prob_tensor(dtype, &dev)?);
            }
            let h = self.node_in.forward(&Tensor::cat(&parts, D::Minus1)?)?;
            let e = if edges.is_empty() {
                Tensor::zeros((0, self.config.hidden), dtype, &dev)?
            } else {
                let mut parts = Vec::new();
                if c.visual {
                    parts.push(self.edge_bottleneck.forward(&edges.features)?);
                }
                if c.boxes {
                    parts.push(box_tensor_for(edge_boxes, nodes.image_size, dtype, &dev)?);
                }
                if c.classes {
                    parts.push(softmax_last(&graph.edge_logits)?);
                }
                self.edge_in.forward(&Tensor::cat(&parts, D::Minus1)?)?
            };
            let (h, _) = self.gnn.forward(&h, &e, &topo)?;
            pooled = topo.graph_mean(&h)?.expect("nodes present");
        }
        let empty_rows: Vec<f64> = nodes
            .graph_ranges()
            .iter()
            .map(|r| if r.is_empty() { 1.0 } else { 0.0 })
            .collect();
        let empty_rows = Tensor::from_vec(empty_rows, (b, 1), &dev)?.to_dtype(dtype)?;
        let pooled = (pooled + empty_rows.broadcast_mul(&self.empty.unsqueeze(0)?)?)?;
        Ok(self.head.forward(&pooled)?)
    }
}

/// Checks that `t` holds `(batch, 3)` criteria logits.
pub fn check_logits(t: &Tensor, batch: usize) -> TResult<()> {
    let dims = t.dims();
    if dims != [batch, NUM_CRITERIA] {
        return Err(candle_core::Error::Msg(format!("logits have shape {dims:?}")));
    }
    Ok(())
}
