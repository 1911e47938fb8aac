//! Pairwise edge scoring.

use candle_core::{Module, Result as TResult, Tensor, D};
use candle_nn::{linear, linear_no_bias, Linear, VarBuilder};

use crate::error::Result;

use super::graph::NodeSet;

/// Two-layer perceptron over concatenated pair descriptors `[x_i, x_j]`,
/// where `x = [h, c, b]`. The first layer is applied as `A x_i + B x_j + b`,
/// which equals a dense layer on the concatenation. Scores are symmetrised
/// by averaging both orders.
#[derive(Debug, Clone)]
pub struct RelPn {
    first_subject: Linear,
    first_object: Linear,
    out: Linear,
}

impl RelPn {
    /// `descriptor` is the per-node input size `F + C + 4`.
    pub fn new(descriptor: usize, hidden: usize, vb: VarBuilder) -> TResult<Self> {
        Ok(Self {
            first_subject: linear_no_bias(descriptor, hidden, vb.pp("first_subject"))?,
            first_object: linear(descriptor, hidden, vb.pp("first_object"))?,
            out: linear(hidden, 1, vb.pp("out"))?,
        })
    }

    /// Per-node `[h, c, b]`, `(n, F + C + 4)`.
    pub fn descriptors(nodes: &NodeSet) -> Result<Tensor> {
        let dtype = nodes.features.dtype();
        let dev = nodes.features.device();
        Ok(Tensor::cat(
            &[nodes.features.clone(), nodes.prob_tensor(dtype, dev)?, nodes.box_tensor(dtype, dev)?],
            D::Minus1,
        )?)
    }

    /// Symmetric logits for the given stacked-node pairs, `(len,)`.
    pub fn pair_logits(&self, descriptors: &Tensor, pairs: &[(usize, usize)]) -> Result<Tensor> {
        let dev = descriptors.device();
        if pairs.is_empty() {
            return Ok(Tensor::zeros(0, descriptors.dtype(), dev)?);
        }
        let p = self.first_subject.forward(descriptors)?;
        let q = self.first_object.forward(descriptors)?;
        let a: Vec<u32> = pairs.iter().map(|x| x.0 as u32).collect();
        let b: Vec<u32> = pairs.iter().map(|x| x.1 as u32).collect();
        let a = Tensor::from_vec(a, pairs.len(), dev)?;
        let b = Tensor::from_vec(b, pairs.len(), dev)?;
        let forward = (p.index_select(&a, 0)? + q.index_select(&b, 0)?)?.relu()?;
        let backward = (p.index_select(&b, 0)? + q.index_select(&a, 0)?)?.relu()?;
        let s = ((self.out.forward(&forward)? + self.out.forward(&backward)?)? * 0.5)?;
        Ok(s.squeeze(1)?)
    }

    /// Full `n x n` score matrix of every graph, with `-inf` on the diagonal.
    pub fn score_matrices(&self, nodes: &NodeSet) -> Result<Vec<Vec<Vec<f64>>>> {
        let (pairs, logits) = self.all_pair_logits(nodes)?;
        let values: Vec<f64> = logits.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        Ok(score_matrices_from(nodes, &pairs, &values))
    }

    /// Logits for every unordered within-graph pair, in stacked order.
    pub fn all_pair_logits(&self, nodes: &NodeSet) -> Result<(Vec<(usize, usize)>, Tensor)> {
        let pairs = all_pairs(nodes);
        let desc = Self::descriptors(nodes)?;
        let logits = self.pair_logits(&desc, &pairs)?;
        Ok((pairs, logits))
    }
}

pub(crate) fn all_pairs(nodes: &NodeSet) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for r in nodes.graph_ranges() {
        for i in r.clone() {
            for j in i + 1..r.end {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

pub(crate) fn score_matrices_from(nodes: &NodeSet, pairs: &[(usize, usize)], values: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let ranges = nodes.graph_ranges();
    let mut mats: Vec<Vec<Vec<f64>>> = ranges
        .iter()
        .map(|r| vec![vec![f64::NEG_INFINITY; r.len()]; r.len()])
        .collect();
    for (&(i, j), &v) in pairs.iter().zip(values) {
        let g = nodes.graph[i];
        let o = ranges[g].start;
        mats[g][i - o][j - o] = v;
        mats[g][j - o][i - o] = v;
    }
    mats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn nodes(n: usize, seed: u64) -> NodeSet {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let boxes = (0..n)
            .map(|_| {
                BBox::from_corners(
                    rng.random_range(0.0..64.0),
                    rng.random_range(0.0..64.0),
                    rng.random_range(0.0..64.0),
                    rng.random_range(0.0..64.0),
                )
            })
            .collect();
        let class_probs = (0..n).map(|k| crate::perception::smoothed_class_probs(1 + k % 6, 0.1)).collect();
        NodeSet {
            boxes,
            class_probs,
            graph: vec![0; n],
            features: Tensor::randn(0f64, 1.0, (n, 8), &Device::Cpu).unwrap(),
            num_graphs: 1,
            image_size: (64, 64),
        }
    }

    fn relpn() -> (VarMap, RelPn) {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F64, &Device::Cpu);
        let r = RelPn::new(8 + 7 + 4, 16, vb).unwrap();
        (vm, r)
    }

    #[test]
    fn two_nodes_one_mirrored_score() {
        let (_vm, r) = relpn();
        let m = &r.score_matrices(&nodes(2, 1)).unwrap()[0];
        assert!(m[0][1].is_finite());
        assert_eq!(m[0][1], m[1][0]);
        assert!(m[0][0] == f64::NEG_INFINITY && m[1][1] == f64::NEG_INFINITY);
        assert!(r.score_matrices(&nodes(1, 1)).unwrap()[0][0][0] == f64::NEG_INFINITY);
    }

    #[test]
    fn permutation_equivariance() {
        let (_vm, r) = relpn();
        let base = nodes(5, 2);
        let perm = [3usize, 0, 4, 1, 2];
        let idx = Tensor::from_vec(perm.iter().map(|&p| p as u32).collect::<Vec<_>>(), 5, &Device::Cpu).unwrap();
        let permuted = NodeSet {
            boxes: perm.iter().map(|&p| base.boxes[p]).collect(),
            class_probs: perm.iter().map(|&p| base.class_probs[p].clone()).collect(),
            features: base.features.index_select(&idx, 0).unwrap(),
            ..base.clone()
        };
        let a = &r.score_matrices(&base).unwrap()[0];
        let b = &r.score_matrices(&permuted).unwrap()[0];
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!((b[i][j] - a[perm[i]][perm[j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_equal_scores() {
        let (vm, r) = relpn();
        for (name, var) in vm.data().lock().unwrap().iter() {
            if name.starts_with("out.") {
                var.set(&var.zeros_like().unwrap()).unwrap();
            }
        }
        let m = &r.score_matrices(&nodes(4, 3)).unwrap()[0];
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert_eq!(m[i][j], 0.0);
                }
            }
        }
        assert_eq!(super::super::sample_edges(m, 1), vec![(0, 1), (0, 2), (0, 3)]);
    }
}
