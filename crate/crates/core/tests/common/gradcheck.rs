//! Central finite-difference checks of analytic gradients in `f64`. Every
//! check returns the largest relative error over the entries it probes.

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::{VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use latent_graph::decoders::{Components, CvsDecoder, CvsDecoderConfig};
use latent_graph::geometry::{union_box, BBox};
use latent_graph::latentgraph::{EdgeSet, EncoderConfig, LatentGraphBatch, NodeSet, Topology, TripletGnn, EDGE_CLASSES};
use latent_graph::perception::{pool_region, Backbone, BackboneConfig, CorruptionConfig, FeatureMap};
use latent_graph::scenegen::{synth_scene, GeneratorConfig, NUM_CLASSES};
use latent_graph::training::{
    recon_loss, scalar, Batch, Dataset, LayoutSource, LgCvsModel, ModelConfig, Stage2Settings, CVS_PREFIX,
    ENCODER_PREFIX, LG_BACKBONE_PREFIX, RECON_PREFIX,
};

const EPS: f64 = 1e-6;

fn rel_error(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6)
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Central differences of a scalar objective over every entry of `x0`.
pub fn input_error(objective: &dyn Fn(&Tensor) -> Tensor, x0: &Tensor) -> f64 {
    let var = Var::from_tensor(x0).unwrap();
    let grads = objective(var.as_tensor()).backward().unwrap();
    let an: Vec<f64> = grads
        .get(var.as_tensor())
        .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
        .unwrap_or_else(|| vec![0.0; x0.elem_count()]);
    let flat: Vec<f64> = x0.flatten_all().unwrap().to_vec1().unwrap();
    let mut worst = 0f64;
    for k in 0..flat.len() {
        let eval = |delta: f64| {
            let mut v = flat.clone();
            v[k] += delta;
            let t = Tensor::from_vec(v, x0.dims(), &Device::Cpu).unwrap();
            objective(&t).to_scalar::<f64>().unwrap()
        };
        let fd = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
        worst = worst.max(rel_error(fd, an[k]));
    }
    worst
}

/// Bilinear region pooling with respect to the feature map.
pub fn pool_region_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x0 = random(&[1, 5, 6, 3], -1.0, 1.0, &mut rng);
    let w = random(&[3], -1.0, 1.0, &mut rng);
    let bbox = BBox::new(3.3, 5.1, 17.7, 20.2).unwrap();
    let objective = |x: &Tensor| {
        let fm = FeatureMap {
            tensor: x.clone(),
            stride: 4,
        };
        (pool_region(&fm, 0, &bbox, 3).unwrap() * &w).unwrap().sum_all().unwrap()
    };
    input_error(&objective, &x0)
}

/// Triplet message passing with respect to node and edge features.
pub fn gnn_error() -> f64 {
    let dev = Device::Cpu;
    let vm = VarMap::new();
    let gnn = TripletGnn::new(4, 2, VarBuilder::from_varmap(&vm, DType::F64, &dev)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for (name, var) in vm.data().lock().unwrap().iter() {
        if name.ends_with("mean_scale") {
            var.set(&random(&[4], 0.1, 0.9, &mut rng)).unwrap();
        }
    }
    let pairs = [(0, 1), (1, 2), (0, 2), (3, 4)];
    let topo = Topology::new(&[0, 0, 0, 1, 1], 2, &pairs, DType::F64, &dev).unwrap();
    let h0 = random(&[5, 4], -1.0, 1.0, &mut rng);
    let e0 = random(&[4, 4], -1.0, 1.0, &mut rng);
    let wh = random(&[5, 4], -1.0, 1.0, &mut rng);
    let we = random(&[4, 4], -1.0, 1.0, &mut rng);
    let objective = |h: &Tensor, e: &Tensor| {
        let (hn, en) = gnn.forward(h, e, &topo).unwrap();
        ((hn * &wh).unwrap().sum_all().unwrap() + (en * &we).unwrap().sum_all().unwrap()).unwrap()
    };
    let nodes = input_error(&|h: &Tensor| objective(h, &e0), &h0);
    let edges = input_error(&|e: &Tensor| objective(&h0, e), &e0);
    nodes.max(edges)
}

/// Criteria decoder with respect to node features, edge features and edge
/// class logits.
pub fn cvs_decoder_error() -> f64 {
    let dev = Device::Cpu;
    let vm = VarMap::new();
    let f = 6;
    let cfg = CvsDecoderConfig {
        features: f,
        node_bottleneck: 4,
        edge_bottleneck: 4,
        hidden: 8,
        gnn_layers: 2,
        components: Components::default(),
    };
    let dec = CvsDecoder::new(cfg, VarBuilder::from_varmap(&vm, DType::F64, &dev)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let boxes = vec![
        BBox::new(2.0, 3.0, 20.0, 18.0).unwrap(),
        BBox::new(10.0, 1.0, 30.0, 12.0).unwrap(),
        BBox::new(5.0, 15.0, 25.0, 31.0).unwrap(),
    ];
    let probs: Vec<Vec<f64>> = (0..3)
        .map(|k| (0..NUM_CLASSES).map(|c| if c == k + 1 { 0.7 } else { 0.05 }).collect())
        .collect();
    let pairs = vec![(0, 1), (1, 2), (0, 2)];
    let edge_boxes: Vec<BBox> = pairs.iter().map(|&(i, j): &(usize, usize)| union_box(&boxes[i], &boxes[j])).collect();
    let n0 = random(&[3, f], -1.0, 1.0, &mut rng);
    let e0 = random(&[3, f], -1.0, 1.0, &mut rng);
    let l0 = random(&[3, EDGE_CLASSES], -1.0, 1.0, &mut rng);
    let w = random(&[1, 3], -1.0, 1.0, &mut rng);
    let objective = |n: &Tensor, e: &Tensor, l: &Tensor| {
        let graph = LatentGraphBatch {
            nodes: NodeSet {
                boxes: boxes.clone(),
                class_probs: probs.clone(),
                graph: vec![0, 0, 0],
                features: n.clone(),
                num_graphs: 1,
                image_size: (32, 32),
            },
            edges: EdgeSet {
                pairs: pairs.clone(),
                boxes: edge_boxes.clone(),
                features: e.clone(),
            },
            edge_logits: l.clone(),
        };
        (dec.forward(&graph, None).unwrap() * &w).unwrap().sum_all().unwrap()
    };
    let a = input_error(&|n: &Tensor| objective(n, &e0, &l0), &n0);
    let b = input_error(&|e: &Tensor| objective(&n0, e, &l0), &e0);
    let c = input_error(&|l: &Tensor| objective(&n0, &e0, l), &l0);
    a.max(b).max(c)
}

/// Reconstruction objective (L1, perceptual, SSIM) with respect to the
/// reconstructed image.
pub fn recon_loss_error() -> f64 {
    let dev = Device::Cpu;
    let vm = VarMap::new();
    let cfg = BackboneConfig {
        image_width: 16,
        image_height: 16,
        features: 8,
    };
    let net = Backbone::new(cfg, VarBuilder::from_varmap(&vm, DType::F64, &dev)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let target = random(&[1, 16, 16, 3], 0.0, 1.0, &mut rng);
    let x0 = random(&[1, 16, 16, 3], 0.0, 1.0, &mut rng);
    input_error(&|x: &Tensor| recon_loss(&target, x, Some(&net)).unwrap().total, &x0)
}

fn micro_config() -> ModelConfig {
    let f = 8;
    ModelConfig {
        image_width: 32,
        image_height: 32,
        features: f,
        encoder: EncoderConfig {
            features: f,
            hidden: 8,
            pool_grid: 2,
            ..Default::default()
        },
        cvs: CvsDecoderConfig {
            features: f,
            node_bottleneck: 4,
            edge_bottleneck: 4,
            hidden: 8,
            gnn_layers: 2,
            components: Components::default(),
        },
        recon_bottleneck: 4,
        layout: LayoutSource::Boxes,
    }
}

/// One image reduced to exactly two detections, so the single edge is
/// fixed and the loss is smooth in every parameter.
fn two_node_batch() -> Batch {
    let gen = GeneratorConfig {
        width: 32,
        height: 32,
        ..Default::default()
    };
    let record = (0..)
        .map(|s| synth_scene(s, &gen).unwrap())
        .find(|r| r.objects.len() >= 2)
        .unwrap();
    let mut ds = Dataset::new(vec![record], &CorruptionConfig::default(), 0).unwrap();
    ds.detections[0].items.truncate(2);
    assert_eq!(ds.detections[0].items.len(), 2);
    Batch::new(&ds, &[0], None, 5)
}

/// Full stage-2 objective (weighted criteria loss, box perturbation and
/// reconstruction) on a two-node model, with respect to a spread of
/// trainable parameters from every trainable group.
pub fn stage2_full_error() -> f64 {
    let dev = Device::Cpu;
    let mut model = LgCvsModel::new(micro_config(), 6, DType::F64, &dev).unwrap();
    model.begin_stage2().unwrap();
    let batch = two_node_batch();
    let settings = Stage2Settings {
        pos_weights: [2.0, 3.0, 1.5],
        lambda_perturb: 0.125,
        reconstruction: true,
        recon_weight: 1.0,
    };
    let loss = |m: &LgCvsModel| m.stage2_loss(&batch, &settings).unwrap().total;
    let grads = loss(&model).backward().unwrap();

    let mut vars: Vec<(String, Var)> = model
        .vars()
        .data()
        .lock()
        .unwrap()
        .iter()
        .filter(|(n, _)| {
            [LG_BACKBONE_PREFIX, ENCODER_PREFIX, CVS_PREFIX, RECON_PREFIX]
                .iter()
                .any(|p| n.starts_with(p))
        })
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    assert!(vars.iter().any(|(n, _)| n.starts_with(RECON_PREFIX)));

    let mut worst = 0f64;
    let mut nonzero = 0;
    for (_, var) in &vars {
        let base = var.as_tensor().copy().unwrap();
        let flat: Vec<f64> = base.flatten_all().unwrap().to_vec1().unwrap();
        let an: Vec<f64> = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1().unwrap())
            .unwrap_or_else(|| vec![0.0; flat.len()]);
        let n = flat.len();
        let mut probes = vec![0, n / 2, n - 1];
        probes.dedup();
        for k in probes {
            let eval = |delta: f64| {
                let mut v = flat.clone();
                v[k] += delta;
                var.set(&Tensor::from_vec(v, base.dims(), &dev).unwrap()).unwrap();
                scalar(&loss(&model)).unwrap()
            };
            let fd = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            var.set(&base).unwrap();
            if an[k].abs() > 1e-9 {
                nonzero += 1;
            }
            worst = worst.max(rel_error(fd, an[k]));
        }
    }
    assert!(nonzero > vars.len(), "too few informative probes ({nonzero})");
    worst
}
