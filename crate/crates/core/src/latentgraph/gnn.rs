//! Triplet message passing with per-graph normalisation.

use candle_core::{DType, Device, Module, Result as TResult, Tensor, D};
use candle_nn::VarBuilder;

use crate::nn::Mlp;

/// Connectivity of a batch of graphs in matrix form.
///
/// Nodes of all graphs are stacked; `graph[k]` names the graph of node `k`.
/// Edges index stacked nodes.
#[derive(Debug, Clone)]
pub struct Topology {
    pub num_nodes: usize,
    pub num_edges: usize,
    subjects: Option<Tensor>,
    objects: Option<Tensor>,
    /// `(n, m)`: `1/deg(i)` where node `i` is the subject of edge `e`.
    gather_subject: Option<Tensor>,
    /// `(n, m)`: `1/deg(i)` where node `i` is the object of edge `e`.
    gather_object: Option<Tensor>,
    /// `(G, n)` with `1/|graph|` entries.
    segment_mean: Option<Tensor>,
    /// `(n, G)` one-hot graph membership.
    segment_broadcast: Option<Tensor>,
}

impl Topology {
    pub fn new(
        graph: &[usize],
        num_graphs: usize,
        pairs: &[(usize, usize)],
        dtype: DType,
        device: &Device,
    ) -> TResult<Self> {
        let n = graph.len();
        let m = pairs.len();
        let mut topo = Self {
            num_nodes: n,
            num_edges: m,
            subjects: None,
            objects: None,
            gather_subject: None,
            gather_object: None,
            segment_mean: None,
            segment_broadcast: None,
        };
        if n == 0 {
            return Ok(topo);
        }
        let mut sizes = vec![0usize; num_graphs];
        for &g in graph {
            sizes[g] += 1;
        }
        let mut mean = vec![0f64; num_graphs * n];
        let mut bcast = vec![0f64; n * num_graphs];
        for (k, &g) in graph.iter().enumerate() {
            mean[g * n + k] = 1.0 / sizes[g] as f64;
            bcast[k * num_graphs + g] = 1.0;
        }
        topo.segment_mean = Some(Tensor::from_vec(mean, (num_graphs, n), device)?.to_dtype(dtype)?);
        topo.segment_broadcast = Some(Tensor::from_vec(bcast, (n, num_graphs), device)?.to_dtype(dtype)?);
        if m == 0 {
            return Ok(topo);
        }
        let mut degree = vec![0usize; n];
        for &(i, j) in pairs {
            degree[i] += 1;
            degree[j] += 1;
        }
        let mut gs = vec![0f64; n * m];
        let mut go = vec![0f64; n * m];
        for (e, &(i, j)) in pairs.iter().enumerate() {
            gs[i * m + e] = 1.0 / degree[i] as f64;
            go[j * m + e] = 1.0 / degree[j] as f64;
        }
        topo.gather_subject = Some(Tensor::from_vec(gs, (n, m), device)?.to_dtype(dtype)?);
        topo.gather_object = Some(Tensor::from_vec(go, (n, m), device)?.to_dtype(dtype)?);
        let s: Vec<u32> = pairs.iter().map(|p| p.0 as u32).collect();
        let o: Vec<u32> = pairs.iter().map(|p| p.1 as u32).collect();
        topo.subjects = Some(Tensor::from_vec(s, m, device)?);
        topo.objects = Some(Tensor::from_vec(o, m, device)?);
        Ok(topo)
    }

    /// Per-graph mean of node rows, `(G, D)`.
    pub fn graph_mean(&self, x: &Tensor) -> TResult<Option<Tensor>> {
        self.segment_mean.as_ref().map(|s| s.matmul(x)).transpose()
    }

    /// Per-graph rows copied back to their nodes, `(n, D)`.
    pub fn broadcast(&self, per_graph: &Tensor) -> TResult<Option<Tensor>> {
        self.segment_broadcast.as_ref().map(|b| b.matmul(per_graph)).transpose()
    }
}

/// Per-graph normalisation `gamma * (x - alpha * mean) / sigma + beta` with
/// `sigma = sqrt(mean((x - alpha * mean)^2) + 1e-10)`, so `sigma >= 1e-5`.
///
/// `alpha` starts at 0: with `alpha = 1` the per-graph mean of the output is
/// exactly `beta`, which makes a mean-pooled readout constant at start.
#[derive(Debug, Clone)]
pub struct GraphNorm {
    gamma: Tensor,
    beta: Tensor,
    alpha: Tensor,
}

pub const GRAPH_NORM_EPS: f64 = 1e-10;

impl GraphNorm {
    pub fn new(dim: usize, vb: VarBuilder) -> TResult<Self> {
        Ok(Self {
            gamma: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
            beta: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
            alpha: vb.get_with_hints(dim, "mean_scale", candle_nn::Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor, topo: &Topology) -> TResult<Tensor> {
        let Some(mu) = topo.graph_mean(x)? else {
            return Ok(x.clone());
        };
        let mu = topo.broadcast(&mu.broadcast_mul(&self.alpha)?)?.expect("nonempty");
        let centered = (x - mu)?;
        let var = topo.graph_mean(&centered.sqr()?)?.expect("nonempty");
        let sigma = topo.broadcast(&(var + GRAPH_NORM_EPS)?.sqrt()?)?.expect("nonempty");
        centered.div(&sigma)?.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)
    }
}

#[derive(Debug, Clone)]
struct TripletLayer {
    mlp: Mlp,
    norm: GraphNorm,
}

/// Stack of triplet layers. For each edge `(i, j)` an MLP over
/// `[h_i, e_ij, h_j]` emits `(d_i, e'_ij, d_j)`; nodes add the mean of their
/// incident contributions, edges add `e'_ij`, and node features are then
/// normalised per graph. Edges are undirected: the MLP runs on both
/// orientations and the two results are averaged.
#[derive(Debug, Clone)]
pub struct TripletGnn {
    layers: Vec<TripletLayer>,
    dim: usize,
}

impl TripletGnn {
    pub fn new(dim: usize, num_layers: usize, vb: VarBuilder) -> TResult<Self> {
        let layers = (0..num_layers)
            .map(|l| {
                Ok(TripletLayer {
                    mlp: Mlp::new(3 * dim, dim, 3 * dim, vb.pp(format!("layer{l}.mlp")))?,
                    norm: GraphNorm::new(dim, vb.pp(format!("layer{l}.norm")))?,
                })
            })
            .collect::<TResult<Vec<_>>>()?;
        Ok(Self { layers, dim })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Updated `(nodes, edges)` with unchanged shapes `(n, D)` and `(m, D)`.
    pub fn forward(&self, nodes: &Tensor, edges: &Tensor, topo: &Topology) -> TResult<(Tensor, Tensor)> {
        let mut h = nodes.clone();
        let mut e = edges.clone();
        if topo.num_nodes == 0 {
            return Ok((h, e));
        }
        for layer in &self.layers {
            if topo.num_edges > 0 {
                let s = topo.subjects.as_ref().expect("edges present");
                let o = topo.objects.as_ref().expect("edges present");
                let hs = h.index_select(s, 0)?;
                let ho = h.index_select(o, 0)?;
                let fwd = layer.mlp.forward(&Tensor::cat(&[&hs, &e, &ho], D::Minus1)?)?;
                let rev = layer.mlp.forward(&Tensor::cat(&[&ho, &e, &hs], D::Minus1)?)?;
                let d = self.dim;
                // Average both orientations so the result does not depend on
                // which endpoint is stored first.
                let ds = ((fwd.narrow(1, 0, d)? + rev.narrow(1, 2 * d, d)?)? * 0.5)?;
                let de = ((fwd.narrow(1, d, d)? + rev.narrow(1, d, d)?)? * 0.5)?;
                let dob = ((fwd.narrow(1, 2 * d, d)? + rev.narrow(1, 0, d)?)? * 0.5)?;
                let gs = topo.gather_subject.as_ref().expect("edges present");
                let go = topo.gather_object.as_ref().expect("edges present");
                h = ((h + gs.matmul(&ds)?)? + go.matmul(&dob)?)?;
                e = (e + de)?;
            }
            h = layer.norm.forward(&h, topo)?;
        }
        Ok((h, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarMap;

    fn build(dim: usize, layers: usize, dtype: DType) -> (VarMap, TripletGnn) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, dtype, &Device::Cpu);
        let g = TripletGnn::new(dim, layers, vb).unwrap();
        (vm, g)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_dtype(DType::F64).unwrap().to_vec2().unwrap()
    }

    #[test]
    fn single_node_is_normalised_skip() {
        let (_vm, g) = build(4, 2, DType::F64);
        let dev = Device::Cpu;
        let h = Tensor::new(&[[1.0f64, -2.0, 0.5, 3.0]], &dev).unwrap();
        let e = Tensor::zeros((0, 4), DType::F64, &dev).unwrap();
        let topo = Topology::new(&[0], 1, &[], DType::F64, &dev).unwrap();
        let (out, eout) = g.forward(&h, &e, &topo).unwrap();
        assert_eq!(eout.dims(), &[0, 4]);
        // Identity affine and alpha = 0: each entry becomes x / sqrt(x^2 + eps).
        let mut x = vec![1.0f64, -2.0, 0.5, 3.0];
        for _ in 0..2 {
            x = x.iter().map(|v| v / (v * v + GRAPH_NORM_EPS).sqrt()).collect();
        }
        for (a, b) in rows(&out)[0].iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shapes_are_preserved() {
        let (_vm, g) = build(8, 2, DType::F32);
        let dev = Device::Cpu;
        let h = Tensor::randn(0f32, 1.0, (5, 8), &dev).unwrap();
        let e = Tensor::randn(0f32, 1.0, (4, 8), &dev).unwrap();
        let topo = Topology::new(&[0, 0, 0, 1, 1], 2, &[(0, 1), (0, 2), (1, 2), (3, 4)], DType::F32, &dev).unwrap();
        let (hn, en) = g.forward(&h, &e, &topo).unwrap();
        assert_eq!(hn.dims(), &[5, 8]);
        assert_eq!(en.dims(), &[4, 8]);
    }

    #[test]
    fn graphs_do_not_interact() {
        let (_vm, g) = build(6, 2, DType::F64);
        let dev = Device::Cpu;
        let h = Tensor::randn(0f64, 1.0, (5, 6), &dev).unwrap();
        let e = Tensor::randn(0f64, 1.0, (3, 6), &dev).unwrap();
        let topo = Topology::new(&[0, 0, 0, 1, 1], 2, &[(0, 1), (1, 2), (3, 4)], DType::F64, &dev).unwrap();
        let (joint, _) = g.forward(&h, &e, &topo).unwrap();
        let first = Topology::new(&[0, 0, 0], 1, &[(0, 1), (1, 2)], DType::F64, &dev).unwrap();
        let (alone, _) = g
            .forward(&h.narrow(0, 0, 3).unwrap(), &e.narrow(0, 0, 2).unwrap(), &first)
            .unwrap();
        let d = (joint.narrow(0, 0, 3).unwrap() - alone).unwrap().abs().unwrap().max_all().unwrap();
        assert!(d.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (vm, g) = build(4, 2, DType::F64);
        // Non-trivial normalisation parameters.
        for (name, var) in vm.data().lock().unwrap().iter() {
            if name.ends_with("mean_scale") {
                var.set(&Tensor::new(&[0.3f64, 0.6, 0.9, 0.1], &Device::Cpu).unwrap()).unwrap();
            }
        }
        let dev = Device::Cpu;
        let pairs = [(0, 1), (1, 2), (0, 2)];
        let topo = Topology::new(&[0, 0, 0], 1, &pairs, DType::F64, &dev).unwrap();
        let h0 = Tensor::randn(0f64, 1.0, (3, 4), &dev).unwrap();
        let e0 = Tensor::randn(0f64, 1.0, (3, 4), &dev).unwrap();
        let wh = Tensor::randn(0f64, 1.0, (3, 4), &dev).unwrap();
        let we = Tensor::randn(0f64, 1.0, (3, 4), &dev).unwrap();
        let objective = |h: &Tensor, e: &Tensor| -> Tensor {
            let (hn, en) = g.forward(h, e, &topo).unwrap();
            ((hn * &wh).unwrap().sum_all().unwrap() + (en * &we).unwrap().sum_all().unwrap()).unwrap()
        };
        let hv = candle_core::Var::from_tensor(&h0).unwrap();
        let ev = candle_core::Var::from_tensor(&e0).unwrap();
        let grads = objective(hv.as_tensor(), ev.as_tensor()).backward().unwrap();
        for (var, base, is_node) in [(&hv, &h0, true), (&ev, &e0, false)] {
            let g_an: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let flat: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
            for k in 0..flat.len() {
                let eps = 1e-6;
                let eval = |delta: f64| {
                    let mut v = flat.clone();
                    v[k] += delta;
                    let t = Tensor::from_vec(v, (3, 4), &dev).unwrap();
                    let r = if is_node { objective(&t, &e0) } else { objective(&h0, &t) };
                    r.to_scalar::<f64>().unwrap()
                };
                let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let rel = (fd - g_an[k]).abs() / fd.abs().max(g_an[k].abs()).max(1e-6);
                assert!(rel < 1e-3, "entry {k}: fd {fd} vs {}", g_an[k]);
            }
        }
    }
}
