//! Epoch loops with per-epoch validation, JSON-lines logs, best-checkpoint
//! selection and resumption.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW, VarMap};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, restore_vars, save_checkpoint, CheckpointMeta};
use super::data::{chunks, epoch_order, AugmentConfig, Batch, Dataset};
use super::losses::{inverse_freq_weights, recon_loss, scalar, weighted_bce};
use super::model::{LgCvsModel, Stage1Weights, Stage2Settings};
use crate::decoders::{backgroundize, images_to_tensor, layouts_to_tensor};
use crate::error::{Error, Result};
use crate::latentgraph::LatentGraphBatch;
use crate::metrics::{
    balanced_accuracy, cvs_map, deepcvs_input, layoutcvs_input, recall_at_k, BaselineClassifier, BaselineConfig,
    BaselineKind, EvalReport, GtGraph, TripletPrediction,
};
use crate::nn::{seeded_var_builder, softmax_last};
use crate::scenegen::RgbImage;
use crate::seed::derive_seed;

/// Default `k` of the triplet recall used for stage-1 model selection.
pub const RECALL_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub relpn_weight: f64,
    pub edge_weight: f64,
    /// Edge classification loss on or off.
    pub edge_loss: bool,
    pub augment: AugmentConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            weight_decay: 1e-4,
            relpn_weight: 1.0,
            edge_weight: 1.0,
            edge_loss: true,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lambda_perturb: f64,
    pub reconstruction: bool,
    pub recon_weight: f64,
    pub augment: AugmentConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 1e-5,
            weight_decay: 1e-4,
            lambda_perturb: 0.125,
            reconstruction: true,
            recon_weight: 1.0,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub recon_weight: f64,
    pub augment: AugmentConfig,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            recon_weight: 1.0,
            augment: AugmentConfig::default(),
        }
    }
}

fn check_schedule(epochs: usize, batch_size: usize, lr: f64, weight_decay: f64) -> Result<()> {
    if epochs == 0 || batch_size == 0 || !(lr > 0.0) || !(weight_decay >= 0.0) {
        return Err(Error::Config(format!(
            "need epochs > 0, batch size > 0, lr > 0 and weight decay >= 0 (got {epochs}, {batch_size}, {lr}, {weight_decay})"
        )));
    }
    Ok(())
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.epochs, self.batch_size, self.lr, self.weight_decay)?;
        self.augment.validate()?;
        if self.relpn_weight < 0.0 || self.edge_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.epochs, self.batch_size, self.lr, self.weight_decay)?;
        self.augment.validate()?;
        if !(self.lambda_perturb >= 0.0) || !(self.recon_weight >= 0.0) {
            return Err(Error::Config("lambda_perturb and recon_weight must be non-negative".into()));
        }
        Ok(())
    }
}

impl BaselineTrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_schedule(self.epochs, self.batch_size, self.lr, self.weight_decay)?;
        self.augment.validate()
    }
}

/// Where and how a fit writes its artefacts.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Continue from the last checkpoint in `out_dir` when present.
    pub resume: bool,
    /// Stored in every checkpoint.
    pub run_snapshot: serde_json::Value,
    pub eval_batch_size: usize,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub losses: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct FitSummary {
    pub best_epoch: usize,
    pub best_metric: f64,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
    /// Records written by this call (not those of earlier, resumed runs).
    pub records: Vec<LogRecord>,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: k + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

struct Logger {
    path: PathBuf,
    file: std::fs::File,
    records: Vec<LogRecord>,
}

impl Logger {
    fn open(path: PathBuf, append: bool) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            path,
            file,
            records: Vec::new(),
        })
    }

    fn write(&mut self, epoch: usize, split: &str, losses: BTreeMap<String, f64>, metrics: BTreeMap<String, f64>) -> Result<()> {
        let r = LogRecord {
            epoch,
            split: split.to_string(),
            losses,
            metrics,
        };
        let line = serde_json::to_string(&r)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.records.push(r);
        Ok(())
    }
}

/// Running means of named values.
#[derive(Default)]
struct Means {
    sums: BTreeMap<String, (f64, usize)>,
}

impl Means {
    fn add(&mut self, name: &str, v: f64) {
        let e = self.sums.entry(name.to_string()).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }

    fn finish(self) -> BTreeMap<String, f64> {
        self.sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
}

fn check_data(model_size: (usize, usize), train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    for (name, ds) in [("training", train), ("validation", val)] {
        if ds.image_size() != Some(model_size) {
            return Err(Error::Config(format!(
                "{name} images are {:?} but the model expects {:?}",
                ds.image_size(),
                model_size
            )));
        }
    }
    Ok(())
}

fn adamw(vars: Vec<candle_core::Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        },
    )?)
}

/// Bookkeeping shared by all fit loops: resume point, best value, paths.
struct Progress {
    best: PathBuf,
    last: PathBuf,
    log: PathBuf,
    start_epoch: usize,
    best_epoch: usize,
    best_metric: f64,
}

impl Progress {
    fn new(opts: &FitOptions, stem: &str) -> Result<Self> {
        std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
        Ok(Self {
            best: opts.out_dir.join(format!("{stem}_best.safetensors")),
            last: opts.out_dir.join(format!("{stem}_last.safetensors")),
            log: opts.out_dir.join(format!("{stem}_log.jsonl")),
            start_epoch: 0,
            best_epoch: 0,
            best_metric: f64::NEG_INFINITY,
        })
    }

    /// Restores `vars` from the last checkpoint when resuming.
    fn resume(&mut self, opts: &FitOptions, vars: &VarMap, device: &Device) -> Result<bool> {
        if !opts.resume || !self.last.exists() {
            return Ok(false);
        }
        let (tensors, meta) = load_checkpoint(&self.last, device)?;
        restore_vars(vars, &tensors, &[""])?;
        self.start_epoch = meta.epoch + 1;
        if self.best.exists() {
            let (_, best) = load_checkpoint(&self.best, device)?;
            self.best_epoch = best.epoch;
            self.best_metric = best.metric;
        }
        Ok(true)
    }

    fn summary(&self, logger: Logger) -> FitSummary {
        FitSummary {
            best_epoch: self.best_epoch,
            best_metric: self.best_metric,
            best_checkpoint: self.best.clone(),
            last_checkpoint: self.last.clone(),
            log: self.log.clone(),
            records: logger.records,
        }
    }
}

fn eval_batches(ds: &Dataset, batch_size: usize) -> Vec<Batch> {
    let order: Vec<usize> = (0..ds.len()).collect();
    chunks(&order, batch_size)
        .iter()
        .enumerate()
        .map(|(b, idx)| Batch::new(ds, idx, None, derive_seed(0, &format!("eval/{b}"))))
        .collect()
}

fn logits_rows(t: &Tensor) -> Result<Vec<[f64; 3]>> {
    let rows: Vec<Vec<f64>> = t.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows.into_iter().map(|r| [r[0], r[1], r[2]]).collect())
}

/// Scored triplets of every image of a batch graph: each edge contributes
/// one triplet per relation class (class 0 excluded), scored by the
/// relation probability times both endpoint class confidences.
pub fn graph_triplets(graph: &LatentGraphBatch) -> Result<Vec<Vec<TripletPrediction>>> {
    let mut out = vec![Vec::new(); graph.nodes.num_graphs];
    if graph.edges.is_empty() {
        return Ok(out);
    }
    let probs: Vec<Vec<f64>> = softmax_last(&graph.edge_logits)?.to_dtype(DType::F64)?.to_vec2()?;
    let best = |p: &[f64]| {
        p.iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
    };
    for (e, &(i, j)) in graph.edges.pairs.iter().enumerate() {
        let (ci, pi) = best(&graph.nodes.class_probs[i]);
        let (cj, pj) = best(&graph.nodes.class_probs[j]);
        for (r, &pr) in probs[e].iter().enumerate().skip(1) {
            out[graph.nodes.graph[i]].push(TripletPrediction {
                subject_class: ci,
                object_class: cj,
                relation: r,
                subject_box: graph.nodes.boxes[i],
                object_box: graph.nodes.boxes[j],
                score: pr * pi * pj,
            });
        }
    }
    Ok(out)
}

/// Perturbation-free outputs of a model over a dataset.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub logits: Vec<[f64; 3]>,
    pub triplets: Vec<Vec<TripletPrediction>>,
}

pub fn predict_dataset(model: &LgCvsModel, ds: &Dataset, batch_size: usize) -> Result<Predictions> {
    let mut logits = Vec::with_capacity(ds.len());
    let mut triplets = Vec::with_capacity(ds.len());
    for batch in eval_batches(ds, batch_size) {
        let (l, out) = model.predict(&batch)?;
        logits.extend(logits_rows(&l)?);
        triplets.extend(graph_triplets(&out.graph)?);
    }
    Ok(Predictions { logits, triplets })
}

fn gt_graphs(ds: &Dataset) -> (Vec<Vec<crate::geometry::BBox>>, Vec<Vec<usize>>) {
    let boxes = ds.records.iter().map(|r| r.boxes()).collect();
    let classes = ds
        .records
        .iter()
        .map(|r| r.objects.iter().map(|o| o.class_id).collect())
        .collect();
    (boxes, classes)
}

/// Triplet recall of predictions against the dataset's scene graphs.
pub fn triplet_recall(ds: &Dataset, triplets: &[Vec<TripletPrediction>], k: usize) -> Result<f64> {
    let (boxes, classes) = gt_graphs(ds);
    let gt: Vec<GtGraph> = ds
        .records
        .iter()
        .enumerate()
        .map(|(n, r)| GtGraph {
            boxes: &boxes[n],
            classes: &classes[n],
            relations: &r.relations,
        })
        .collect();
    recall_at_k(triplets, &gt, k)
}

/// Report of criteria logits against dataset labels.
pub fn report(logits: &[[f64; 3]], labels: &[[u8; 3]], recall: Option<f64>, k: usize) -> Result<EvalReport> {
    let (aps, map) = cvs_map(logits, labels)?;
    let (bacc, mean_bacc) = balanced_accuracy(logits, labels, 0.0)?;
    Ok(EvalReport {
        per_criterion_ap: aps,
        map,
        bacc,
        mean_bacc,
        recall_at_k: recall,
        k,
        images: logits.len(),
    })
}

/// Full metric report of a latent graph model.
pub fn evaluate(model: &LgCvsModel, ds: &Dataset, batch_size: usize, k: usize) -> Result<EvalReport> {
    let p = predict_dataset(model, ds, batch_size)?;
    let recall = triplet_recall(ds, &p.triplets, k).ok();
    report(&p.logits, &ds.labels(), recall, k)
}

/// Stage 1: relation proposal and edge classification on the training
/// split, model selection by validation triplet recall.
pub fn fit_stage1(
    model: &mut LgCvsModel,
    cfg: &Stage1Config,
    train: &Dataset,
    val: &Dataset,
    opts: &FitOptions,
) -> Result<FitSummary> {
    cfg.validate()?;
    check_data(model.config().image_size(), train, val)?;
    if model.stage() != 1 {
        return Err(Error::Config("stage 1 needs a model that has not entered stage 2".into()));
    }
    let mut prog = Progress::new(opts, "stage1")?;
    let resumed = prog.resume(opts, model.vars(), &model.device().clone())?;
    let mut logger = Logger::open(prog.log.clone(), resumed)?;
    let mut opt = adamw(model.stage1_vars(), cfg.lr, cfg.weight_decay)?;
    let weights = Stage1Weights {
        relpn: cfg.relpn_weight,
        edge: cfg.edge_weight,
        edge_loss: cfg.edge_loss,
    };
    let root = derive_seed(opts.seed, "stage1");
    for epoch in prog.start_epoch..cfg.epochs {
        let mut means = Means::default();
        let order = epoch_order(train.len(), root, epoch);
        for (b, idx) in chunks(&order, cfg.batch_size).iter().enumerate() {
            let batch = Batch::new(train, idx, Some(&cfg.augment), derive_seed(root, &format!("{epoch}/{b}")));
            if let Some(l) = model.stage1_loss(&batch, &weights)? {
                means.add("total", scalar(&l.total)?);
                means.add("relpn", l.relpn);
                means.add("edge", l.edge);
                opt.backward_step(&l.total)?;
            }
        }
        logger.write(epoch, "train", means.finish(), BTreeMap::new())?;
        let p = predict_dataset(model, val, opts.eval_batch_size)?;
        let recall = triplet_recall(val, &p.triplets, RECALL_K)?;
        let mut metrics = BTreeMap::new();
        metrics.insert(format!("recall@{RECALL_K}"), recall);
        logger.write(epoch, "val", BTreeMap::new(), metrics)?;
        log::info!("stage 1 epoch {epoch}: val recall@{RECALL_K} {recall:.4}");
        let name = format!("recall@{RECALL_K}");
        model.save(&prog.last, epoch, recall, &name, opts.run_snapshot.clone())?;
        if recall > prog.best_metric {
            prog.best_metric = recall;
            prog.best_epoch = epoch;
            model.save(&prog.best, epoch, recall, &name, opts.run_snapshot.clone())?;
        }
    }
    Ok(prog.summary(logger))
}

/// Stage 2: the stage-1 feature extractor is frozen, a trainable copy feeds
/// the latent graph and everything downstream is trained on the criteria
/// (and optionally reconstruction) objective. Selection by validation mAP.
pub fn fit_stage2(
    model: &mut LgCvsModel,
    cfg: &Stage2Config,
    train: &Dataset,
    val: &Dataset,
    opts: &FitOptions,
) -> Result<FitSummary> {
    cfg.validate()?;
    check_data(model.config().image_size(), train, val)?;
    let pos_weights = inverse_freq_weights(&train.labels())?;
    model.begin_stage2()?;
    let mut prog = Progress::new(opts, "stage2")?;
    let resumed = prog.resume(opts, model.vars(), &model.device().clone())?;
    let mut logger = Logger::open(prog.log.clone(), resumed)?;
    let mut opt = adamw(model.stage2_vars(cfg.reconstruction), cfg.lr, cfg.weight_decay)?;
    let settings = Stage2Settings {
        pos_weights,
        lambda_perturb: cfg.lambda_perturb,
        reconstruction: cfg.reconstruction,
        recon_weight: cfg.recon_weight,
    };
    let root = derive_seed(opts.seed, "stage2");
    for epoch in prog.start_epoch..cfg.epochs {
        let mut means = Means::default();
        let order = epoch_order(train.len(), root, epoch);
        for (b, idx) in chunks(&order, cfg.batch_size).iter().enumerate() {
            let batch = Batch::new(train, idx, Some(&cfg.augment), derive_seed(root, &format!("{epoch}/{b}")));
            let l = model.stage2_loss(&batch, &settings)?;
            means.add("total", scalar(&l.total)?);
            means.add("cvs", l.cvs);
            if let Some(r) = l.recon {
                means.add("recon", r[0]);
                means.add("recon_l1", r[1]);
                means.add("recon_perceptual", r[2]);
                means.add("recon_ssim", r[3]);
                if epoch == 0 && b == 0 {
                    means.add("recon_first_step", r[0]);
                }
            }
            opt.backward_step(&l.total)?;
        }
        logger.write(epoch, "train", means.finish(), BTreeMap::new())?;
        let p = predict_dataset(model, val, opts.eval_batch_size)?;
        let r = report(&p.logits, &val.labels(), None, RECALL_K)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("map".to_string(), r.map);
        metrics.insert("bacc".to_string(), r.mean_bacc);
        for c in 0..3 {
            metrics.insert(format!("ap_c{}", c + 1), r.per_criterion_ap[c]);
        }
        logger.write(epoch, "val", BTreeMap::new(), metrics)?;
        log::info!("stage 2 epoch {epoch}: val mAP {:.4}", r.map);
        model.save(&prog.last, epoch, r.map, "map", opts.run_snapshot.clone())?;
        if r.map > prog.best_metric {
            prog.best_metric = r.map;
            prog.best_epoch = epoch;
            model.save(&prog.best, epoch, r.map, "map", opts.run_snapshot.clone())?;
        }
    }
    Ok(prog.summary(logger))
}

/// A trained or fresh baseline classifier with its variables.
pub struct BaselineModel {
    pub config: BaselineConfig,
    vars: VarMap,
    net: BaselineClassifier,
    dtype: DType,
    device: Device,
}

impl BaselineModel {
    pub fn new(config: BaselineConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let vars = VarMap::new();
        let net = BaselineClassifier::new(config, seeded_var_builder(&vars, seed, dtype, device))?;
        Ok(Self {
            config,
            vars,
            net,
            dtype,
            device: device.clone(),
        })
    }

    pub fn vars(&self) -> &VarMap {
        &self.vars
    }

    fn inputs(&self, batch: &Batch) -> Result<(Tensor, Tensor, Tensor)> {
        let (w, h) = batch.image_size();
        let layouts = batch
            .examples
            .iter()
            .map(|e| layoutcvs_input(&e.detections, w, h))
            .collect::<Result<Vec<_>>>()?;
        let layout = layouts_to_tensor(&layouts, self.dtype, &self.device)?;
        let images = batch.images(self.dtype, &self.device)?;
        let input = match self.config.kind {
            BaselineKind::Layout => layout.clone(),
            BaselineKind::Deep => deepcvs_input(&images, &layout)?,
        };
        Ok((input, layout, images))
    }

    pub fn predict(&self, batch: &Batch) -> Result<Tensor> {
        Ok(self.net.forward(&self.inputs(batch)?.0)?.logits)
    }

    /// Weighted criteria loss (plus reconstruction for the variant that has
    /// it) and its components.
    pub fn loss(&self, batch: &Batch, pos_weights: &[f64; 3], recon_weight: f64) -> Result<(Tensor, f64, Option<f64>)> {
        let (input, layout, images) = self.inputs(batch)?;
        let out = self.net.forward(&input)?;
        let labels = batch.label_tensor(self.dtype, &self.device)?;
        let cvs = weighted_bce(&out.logits, &labels, pos_weights)?;
        let cvs_value = scalar(&cvs)?;
        match self.net.reconstruction() {
            Some(head) => {
                let bgs: Vec<RgbImage> = batch
                    .examples
                    .iter()
                    .enumerate()
                    .map(|(g, e)| backgroundize(&e.image, &e.detections.boxes(), derive_seed(batch.seed, &format!("background/{g}"))))
                    .collect();
                let refs: Vec<&RgbImage> = bgs.iter().collect();
                let bg = images_to_tensor(&refs, self.dtype, &self.device)?;
                let rec = head.forward(&out.pooled, &layout, &bg)?;
                let rl = recon_loss(&images, &rec, None)?;
                let total = (cvs + (&rl.total * recon_weight)?)?;
                Ok((total, cvs_value, Some(scalar(&rl.total)?)))
            }
            None => Ok((cvs, cvs_value, None)),
        }
    }

    pub fn predict_dataset(&self, ds: &Dataset, batch_size: usize) -> Result<Vec<[f64; 3]>> {
        let mut out = Vec::with_capacity(ds.len());
        for batch in eval_batches(ds, batch_size) {
            out.extend(logits_rows(&self.predict(&batch)?)?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, epoch: usize, metric: f64, run: serde_json::Value) -> Result<()> {
        let meta = CheckpointMeta {
            stage: 0,
            epoch,
            metric,
            metric_name: "map".into(),
            config: serde_json::json!({ "baseline": self.config, "run": run }),
        };
        save_checkpoint(&self.vars, &meta, path)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<(Self, CheckpointMeta)> {
        let (tensors, meta) = load_checkpoint(path, device)?;
        let cfg: BaselineConfig = meta
            .config
            .get("baseline")
            .cloned()
            .ok_or_else(|| Error::Checkpoint(format!("{} is not a baseline checkpoint", path.display())))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string())))?;
        let model = Self::new(cfg, 0, dtype, device)?;
        restore_vars(&model.vars, &tensors, &[""])?;
        Ok((model, meta))
    }
}

/// Trains a baseline with the same schedule machinery as the latent graph
/// model; selection by validation mAP.
pub fn fit_baseline(
    model: &mut BaselineModel,
    cfg: &BaselineTrainConfig,
    train: &Dataset,
    val: &Dataset,
    opts: &FitOptions,
) -> Result<FitSummary> {
    cfg.validate()?;
    let size = train
        .image_size()
        .ok_or_else(|| Error::Config("empty training split".into()))?;
    check_data(size, train, val)?;
    let pos_weights = inverse_freq_weights(&train.labels())?;
    let stem = match model.config.kind {
        BaselineKind::Layout => "layoutcvs",
        BaselineKind::Deep => "deepcvs",
    };
    let mut prog = Progress::new(opts, stem)?;
    let resumed = prog.resume(opts, &model.vars, &model.device.clone())?;
    let mut logger = Logger::open(prog.log.clone(), resumed)?;
    let mut opt = adamw(model.vars.all_vars(), cfg.lr, cfg.weight_decay)?;
    let root = derive_seed(opts.seed, stem);
    for epoch in prog.start_epoch..cfg.epochs {
        let mut means = Means::default();
        let order = epoch_order(train.len(), root, epoch);
        for (b, idx) in chunks(&order, cfg.batch_size).iter().enumerate() {
            let batch = Batch::new(train, idx, Some(&cfg.augment), derive_seed(root, &format!("{epoch}/{b}")));
            let (total, cvs, recon) = model.loss(&batch, &pos_weights, cfg.recon_weight)?;
            means.add("total", scalar(&total)?);
            means.add("cvs", cvs);
            if let Some(r) = recon {
                means.add("recon", r);
            }
            opt.backward_step(&total)?;
        }
        logger.write(epoch, "train", means.finish(), BTreeMap::new())?;
        let logits = model.predict_dataset(val, opts.eval_batch_size)?;
        let r = report(&logits, &val.labels(), None, RECALL_K)?;
        let mut metrics = BTreeMap::new();
        metrics.insert("map".to_string(), r.map);
        metrics.insert("bacc".to_string(), r.mean_bacc);
        logger.write(epoch, "val", BTreeMap::new(), metrics)?;
        log::info!("{stem} epoch {epoch}: val mAP {:.4}", r.map);
        model.save(&prog.last, epoch, r.map, opts.run_snapshot.clone())?;
        if r.map > prog.best_metric {
            prog.best_metric = r.map;
            prog.best_epoch = epoch;
            model.save(&prog.best, epoch, r.map, opts.run_snapshot.clone())?;
        }
    }
    Ok(prog.summary(logger))
}
