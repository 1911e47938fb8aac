//! The command implementations behind the binary. Each takes a validated
//! [`RunConfig`] and the output root and returns what it produced.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::decoders::{save_layout_pngs, save_rgb_png, tensor_to_image};
use crate::error::{Error, Result};
use crate::metrics::{layoutcvs_input, BaselineKind, EvalReport};
use crate::scenegen::{read_dataset, synth_scene, write_dataset, SceneRecord};
use crate::seed::derive_seed;
use crate::training::{
    evaluate, fit_baseline, fit_stage1, fit_stage2, load_checkpoint, predict_dataset, report, restore_vars,
    triplet_recall, Batch, BaselineModel, Dataset, FitOptions, FitSummary, LgCvsModel, ModelConfig, DETECTOR_PREFIX,
    ENCODER_PREFIX,
};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

fn device() -> Device {
    Device::Cpu
}

/// Scene count and criterion positive rates of one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub split: String,
    pub scenes: usize,
    pub positive_rates: [f64; 3],
}

pub fn positive_rates(labels: &[[u8; 3]]) -> [f64; 3] {
    let n = labels.len().max(1) as f64;
    let mut r = [0.0; 3];
    for l in labels {
        for c in 0..3 {
            r[c] += l[c] as f64;
        }
    }
    r.map(|v| v / n)
}

fn split_sizes(cfg: &RunConfig) -> [usize; 3] {
    [cfg.data.train, cfg.data.val, cfg.data.test]
}

/// Renders scenes `range` on up to `threads` worker threads, in order.
fn render(cfg: &RunConfig, range: std::ops::Range<usize>, threads: usize) -> Result<Vec<SceneRecord>> {
    let idx: Vec<usize> = range.collect();
    let shard = idx.len().div_ceil(threads.max(1)).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = idx
            .chunks(shard)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|&k| synth_scene(derive_seed(cfg.seed, &format!("scene/{k}")), &cfg.generator))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(idx.len());
        for h in handles {
            out.extend(h.join().expect("scene worker panicked")?);
        }
        Ok(out)
    })
}

/// Generates the train, val and test splits under the data directory.
/// Refuses to touch an existing directory unless `force` is set.
pub fn cmd_dataset(cfg: &RunConfig, root: &Path, force: bool) -> Result<Vec<SplitSummary>> {
    let dir = cfg.data_dir(root);
    if dir.exists() {
        if !force {
            return Err(Error::Config(format!(
                "{} already exists; pass --force to overwrite it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut start = 0;
    let mut out = Vec::new();
    for (split, n) in SPLITS.iter().zip(split_sizes(cfg)) {
        let records = render(cfg, start..start + n, threads)?;
        start += n;
        write_dataset(&records, &dir.join(format!("{split}.jsonl")))?;
        let labels: Vec<[u8; 3]> = records.iter().map(|r| r.cvs).collect();
        out.push(SplitSummary {
            split: split.to_string(),
            scenes: n,
            positive_rates: positive_rates(&labels),
        });
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&dir, e))?;
    Ok(out)
}

/// One split with its fixed detections.
pub fn load_split(cfg: &RunConfig, root: &Path, split: &str) -> Result<Dataset> {
    let k = SPLITS
        .iter()
        .position(|s| *s == split)
        .ok_or_else(|| Error::Config(format!("unknown split {split:?}; expected one of {SPLITS:?}")))?;
    let path = cfg.data_dir(root).join(format!("{split}.jsonl"));
    if !path.exists() {
        return Err(Error::Config(format!(
            "{} not found; run the dataset command first",
            path.display()
        )));
    }
    let records = read_dataset(&path)?;
    let want = split_sizes(cfg)[k];
    if records.len() != want {
        return Err(Error::Config(format!(
            "{} holds {} scenes but the config asks for {want}",
            path.display(),
            records.len()
        )));
    }
    Dataset::new(records, &cfg.corruption, derive_seed(cfg.seed, &format!("detections/{split}")))
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn load_splits(cfg: &RunConfig, root: &Path) -> Result<Splits> {
    Ok(Splits {
        train: load_split(cfg, root, "train")?,
        val: load_split(cfg, root, "val")?,
        test: load_split(cfg, root, "test")?,
    })
}

/// What `train` optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainTarget {
    Stage1,
    Stage2,
    Baseline(BaselineKind),
}

fn options(cfg: &RunConfig, out_dir: &Path, resume: bool) -> FitOptions {
    FitOptions {
        out_dir: out_dir.to_path_buf(),
        seed: cfg.seed,
        resume,
        run_snapshot: cfg.snapshot(),
        eval_batch_size: cfg.eval.batch_size,
    }
}

fn baseline_stem(kind: BaselineKind) -> &'static str {
    match kind {
        BaselineKind::Layout => "layoutcvs",
        BaselineKind::Deep => "deepcvs",
    }
}

pub fn stage1_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("stage1_best.safetensors")
}

pub fn stage2_checkpoint(run_dir: &Path) -> PathBuf {
    run_dir.join("stage2_best.safetensors")
}

pub fn baseline_checkpoint(run_dir: &Path, kind: BaselineKind) -> PathBuf {
    run_dir.join(format!("{}_best.safetensors", baseline_stem(kind)))
}

pub fn train_stage1(cfg: &RunConfig, data: &Splits, out_dir: &Path, resume: bool) -> Result<FitSummary> {
    let mut model = LgCvsModel::new(cfg.model.clone(), derive_seed(cfg.seed, "init"), DType::F32, &device())?;
    fit_stage1(&mut model, &cfg.stage1, &data.train, &data.val, &options(cfg, out_dir, resume))
}

/// Builds the configured model, takes the feature extractor and encoder
/// from a stage-1 checkpoint and runs stage 2. The criteria decoder and
/// reconstruction settings may differ from the stage-1 run; everything the
/// checkpoint provides must match.
pub fn train_stage2(
    cfg: &RunConfig,
    data: &Splits,
    stage1: &Path,
    out_dir: &Path,
    resume: bool,
) -> Result<(LgCvsModel, FitSummary)> {
    if !stage1.exists() {
        return Err(Error::Config(format!(
            "stage 2 needs a stage-1 checkpoint; {} does not exist (run train --stage 1 first)",
            stage1.display()
        )));
    }
    let (tensors, meta) = load_checkpoint(stage1, &device())?;
    if meta.stage != 1 {
        return Err(Error::Config(format!("{} is not a stage-1 checkpoint", stage1.display())));
    }
    let trained: ModelConfig = meta
        .config
        .get("model")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("stage-1 checkpoint has no model config".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string())))?;
    if trained.encoder != cfg.model.encoder
        || trained.features != cfg.model.features
        || trained.image_size() != cfg.model.image_size()
    {
        return Err(Error::Config(
            "the stage-1 checkpoint was trained with a different encoder or image size".into(),
        ));
    }
    let mut model = LgCvsModel::new(cfg.model.clone(), derive_seed(cfg.seed, "init"), DType::F32, &device())?;
    restore_vars(model.vars(), &tensors, &[DETECTOR_PREFIX, ENCODER_PREFIX])?;
    let summary = fit_stage2(&mut model, &cfg.stage2, &data.train, &data.val, &options(cfg, out_dir, resume))?;
    Ok((model, summary))
}

pub fn train_baseline(cfg: &RunConfig, kind: BaselineKind, data: &Splits, out_dir: &Path, resume: bool) -> Result<FitSummary> {
    let mut model = BaselineModel::new(
        cfg.baseline.model(kind),
        derive_seed(cfg.seed, &format!("init/{}", baseline_stem(kind))),
        DType::F32,
        &device(),
    )?;
    fit_baseline(&mut model, &cfg.baseline.train, &data.train, &data.val, &options(cfg, out_dir, resume))
}

pub fn cmd_train(cfg: &RunConfig, root: &Path, target: TrainTarget, resume: bool) -> Result<FitSummary> {
    let run_dir = cfg.run_dir(root);
    let stage1 = stage1_checkpoint(&run_dir);
    if target == TrainTarget::Stage2 && !stage1.exists() {
        // Fail before the (slow) dataset load.
        return Err(Error::Config(format!(
            "stage 2 needs a stage-1 checkpoint; {} does not exist (run train --stage 1 first)",
            stage1.display()
        )));
    }
    let data = load_splits(cfg, root)?;
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml()?).map_err(|e| Error::io(&run_dir, e))?;
    match target {
        TrainTarget::Stage1 => train_stage1(cfg, &data, &run_dir, resume),
        TrainTarget::Stage2 => train_stage2(cfg, &data, &stage1, &run_dir, resume).map(|r| r.1),
        TrainTarget::Baseline(kind) => train_baseline(cfg, kind, &data, &run_dir, resume),
    }
}

/// A loaded checkpoint of either model family.
pub enum Evaluable {
    LatentGraph(LgCvsModel),
    Baseline(BaselineModel),
}

pub fn load_evaluable(path: &Path) -> Result<Evaluable> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    let (_, meta) = load_checkpoint(path, &device())?;
    Ok(if meta.stage == 0 {
        Evaluable::Baseline(BaselineModel::load(path, DType::F32, &device())?.0)
    } else {
        Evaluable::LatentGraph(LgCvsModel::load(path, DType::F32, &device())?.0)
    })
}

/// Metrics and per-image logits of a checkpoint on one split.
pub fn evaluate_checkpoint(cfg: &RunConfig, model: &Evaluable, ds: &Dataset) -> Result<(EvalReport, Vec<[f64; 3]>)> {
    let bs = cfg.eval.batch_size;
    match model {
        Evaluable::LatentGraph(m) => {
            let p = predict_dataset(m, ds, bs)?;
            let recall = triplet_recall(ds, &p.triplets, cfg.eval.k).ok();
            Ok((report(&p.logits, &ds.labels(), recall, cfg.eval.k)?, p.logits))
        }
        Evaluable::Baseline(m) => {
            let logits = m.predict_dataset(ds, bs)?;
            Ok((report(&logits, &ds.labels(), None, cfg.eval.k)?, logits))
        }
    }
}

fn per_image_csv(logits: &[[f64; 3]], labels: &[[u8; 3]]) -> String {
    let mut s = String::from("index,logit_c1,logit_c2,logit_c3,label_c1,label_c2,label_c3\n");
    for (k, (l, y)) in logits.iter().zip(labels).enumerate() {
        writeln!(s, "{k},{},{},{},{},{},{}", l[0], l[1], l[2], y[0], y[1], y[2]).expect("string write");
    }
    s
}

/// Files written by `eval`.
#[derive(Debug, Clone)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub report_path: PathBuf,
    pub csv_path: Option<PathBuf>,
}

/// Evaluates `checkpoint` (the run's stage-2 best by default) on `split`
/// and writes a JSON report, plus per-image scores as CSV when asked.
pub fn cmd_eval(cfg: &RunConfig, root: &Path, checkpoint: Option<&Path>, split: &str, csv: bool) -> Result<EvalOutput> {
    let run_dir = cfg.run_dir(root);
    let ckpt = checkpoint.map_or_else(|| stage2_checkpoint(&run_dir), Path::to_path_buf);
    let model = load_evaluable(&ckpt)?;
    let ds = load_split(cfg, root, split)?;
    let (report, logits) = evaluate_checkpoint(cfg, &model, &ds)?;
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let report_path = run_dir.join(format!("eval_{stem}_{split}.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&report_path, e))?;
    let csv_path = if csv {
        let p = run_dir.join(format!("eval_{stem}_{split}.csv"));
        std::fs::write(&p, per_image_csv(&logits, &ds.labels())).map_err(|e| Error::io(&p, e))?;
        Some(p)
    } else {
        None
    };
    Ok(EvalOutput {
        report,
        report_path,
        csv_path,
    })
}

/// Writes input, reconstruction and per-class layout images for the first
/// `count` scenes of `split`.
pub fn cmd_reconstruct(cfg: &RunConfig, root: &Path, checkpoint: Option<&Path>, split: &str, count: usize) -> Result<Vec<PathBuf>> {
    let run_dir = cfg.run_dir(root);
    let ckpt = checkpoint.map_or_else(|| stage2_checkpoint(&run_dir), Path::to_path_buf);
    let model = match load_evaluable(&ckpt)? {
        Evaluable::LatentGraph(m) if m.stage() == 2 => m,
        _ => {
            return Err(Error::Config(format!(
                "{} is not a stage-2 latent graph checkpoint",
                ckpt.display()
            )))
        }
    };
    let ds = load_split(cfg, root, split)?;
    let n = count.min(ds.len());
    let out_dir = run_dir.join("reconstructions").join(split);
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut written = Vec::new();
    let order: Vec<usize> = (0..n).collect();
    for (b, idx) in order.chunks(cfg.eval.batch_size).enumerate() {
        let batch = Batch::new(&ds, idx, None, derive_seed(cfg.seed, &format!("reconstruct/{b}")));
        let (_, _, out) = model.encode(&batch)?;
        let recon = model.reconstruct(&batch, &out)?.clamp(0.0, 1.0)?;
        for (g, &k) in idx.iter().enumerate() {
            let input = out_dir.join(format!("{k:04}_input.png"));
            save_rgb_png(&batch.examples[g].image, &input)?;
            let rec = out_dir.join(format!("{k:04}_recon.png"));
            save_rgb_png(&tensor_to_image(&recon.get(g)?)?, &rec)?;
            let (w, h) = batch.image_size();
            let layout = layoutcvs_input(&batch.examples[g].detections, w, h)?;
            written.extend([input, rec]);
            written.extend(save_layout_pngs(&layout, &out_dir, &format!("{k:04}_layout"))?);
        }
    }
    Ok(written)
}

/// One configuration of a sweep and its scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub settings: Vec<String>,
    pub val_map: f64,
    pub test_map: f64,
    pub test_bacc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push_str(",val_map,test_map,test_bacc\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6},{:.6}", r.settings.join(","), r.val_map, r.test_map, r.test_bacc)
                .expect("string write");
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| {} | val mAP | test mAP | test bAcc |\n", self.columns.join(" | "));
        s.push_str(&"|---".repeat(self.columns.len() + 3));
        s.push_str("|\n");
        for r in &self.rows {
            writeln!(
                s,
                "| {} | {:.4} | {:.4} | {:.4} |",
                r.settings.join(" | "),
                r.val_map,
                r.test_map,
                r.test_bacc
            )
            .expect("string write");
        }
        s
    }
}

pub const SWEEPS: [&str; 6] = [
    "components",
    "edges",
    "lambda_perturb",
    "recon_bottleneck",
    "gnn_layers",
    "reconstruction",
];

fn mark(b: bool) -> String {
    if b { "yes" } else { "no" }.to_string()
}

/// Configurations of a named sweep: column names and, per row, the cell
/// values and the modified config.
pub fn sweep_variants(name: &str, cfg: &RunConfig) -> Result<(Vec<String>, Vec<(Vec<String>, RunConfig)>)> {
    let cols = |c: &[&str]| c.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    let mut rows = Vec::new();
    let columns = match name {
        "components" => {
            for (v, b, c) in [
                (false, true, true),
                (true, false, false),
                (true, true, false),
                (true, false, true),
                (true, true, true),
            ] {
                let mut x = cfg.clone();
                x.model.cvs.components.visual = v;
                x.model.cvs.components.boxes = b;
                x.model.cvs.components.classes = c;
                rows.push((vec![mark(v), mark(b), mark(c)], x));
            }
            cols(&["visual_features", "box_coordinates", "class_probabilities"])
        }
        "edges" => {
            for (p, l) in [(false, false), (true, false), (false, true), (true, true)] {
                let mut x = cfg.clone();
                x.model.encoder.edge_proposal = p;
                x.stage1.edge_loss = l;
                rows.push((vec![mark(p), mark(l)], x));
            }
            cols(&["edge_proposal", "edge_loss"])
        }
        "lambda_perturb" => {
            for &v in &cfg.sweep.lambda_perturb {
                let mut x = cfg.clone();
                x.stage2.lambda_perturb = v;
                rows.push((vec![v.to_string()], x));
            }
            cols(&["lambda_perturb"])
        }
        "recon_bottleneck" => {
            for &v in &cfg.sweep.recon_bottleneck {
                let mut x = cfg.clone();
                x.model.recon_bottleneck = v;
                x.stage2.reconstruction = true;
                rows.push((vec![v.to_string()], x));
            }
            cols(&["recon_bottleneck"])
        }
        "gnn_layers" => {
            for &v in &cfg.sweep.gnn_layers {
                let mut x = cfg.clone();
                x.model.cvs.gnn_layers = v;
                rows.push((vec![v.to_string()], x));
            }
            cols(&["gnn_layers"])
        }
        "reconstruction" => {
            for v in [false, true] {
                let mut x = cfg.clone();
                x.stage2.reconstruction = v;
                rows.push((vec![mark(v)], x));
            }
            cols(&["reconstruction"])
        }
        other => {
            return Err(Error::Config(format!("unknown sweep {other:?}; expected one of {SWEEPS:?}")));
        }
    };
    if rows.is_empty() {
        return Err(Error::Config(format!("sweep {name:?} has an empty grid")));
    }
    for (_, x) in &rows {
        x.validate()?;
    }
    Ok((columns, rows))
}

/// Trains and scores every configuration of a sweep. Stage-1 runs are
/// shared between rows with the same encoder and stage-1 settings. Writes
/// `<name>.csv` and `<name>.md` under the run's `sweeps` directory.
pub fn cmd_sweep(cfg: &RunConfig, root: &Path, name: &str) -> Result<SweepTable> {
    let (columns, variants) = sweep_variants(name, cfg)?;
    let data = load_splits(cfg, root)?;
    let sweep_dir = cfg.run_dir(root).join("sweeps");
    let mut rows = Vec::new();
    for (settings, x) in variants {
        let key = format!(
            "stage1-proposal_{}-edgeloss_{}",
            mark(x.model.encoder.edge_proposal),
            mark(x.stage1.edge_loss)
        );
        let s1_dir = sweep_dir.join(&key);
        let s1 = stage1_checkpoint(&s1_dir);
        if !s1.exists() {
            log::info!("sweep {name}: stage 1 for {key}");
            train_stage1(&x, &data, &s1_dir, false)?;
        }
        let row_dir = sweep_dir.join(name).join(settings.join("_"));
        log::info!("sweep {name}: stage 2 for {settings:?}");
        let (_, summary) = train_stage2(&x, &data, &s1, &row_dir, false)?;
        let (best, _) = LgCvsModel::load(&summary.best_checkpoint, DType::F32, &device())?;
        let r = evaluate(&best, &data.test, x.eval.batch_size, x.eval.k)?;
        rows.push(SweepRow {
            settings,
            val_map: summary.best_metric,
            test_map: r.map,
            test_bacc: r.mean_bacc,
        });
    }
    let table = SweepTable {
        name: name.to_string(),
        columns,
        rows,
    };
    std::fs::create_dir_all(&sweep_dir).map_err(|e| Error::io(&sweep_dir, e))?;
    for (ext, body) in [("csv", table.to_csv()), ("md", table.to_markdown())] {
        let p = sweep_dir.join(format!("{name}.{ext}"));
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_grids_have_expected_rows() {
        let cfg = RunConfig::default();
        let rows = |n| sweep_variants(n, &cfg).unwrap().1.len();
        assert_eq!(rows("components"), 5);
        assert_eq!(rows("edges"), 4);
        assert_eq!(rows("lambda_perturb"), 4);
        assert_eq!(rows("recon_bottleneck"), 4);
        assert_eq!(rows("gnn_layers"), 4);
        assert_eq!(rows("reconstruction"), 2);
        assert!(sweep_variants("nope", &cfg).unwrap_err().is_config_error());

        let (_, v) = sweep_variants("lambda_perturb", &cfg).unwrap();
        let lambdas: Vec<f64> = v.iter().map(|(_, c)| c.stage2.lambda_perturb).collect();
        assert_eq!(lambdas, vec![0.0, 0.0625, 0.125, 0.25]);
        let (_, v) = sweep_variants("components", &cfg).unwrap();
        let first = v[0].1.model.cvs.components;
        assert!(!first.visual && first.boxes && first.classes);
    }

    #[test]
    fn tables_render_every_row() {
        let t = SweepTable {
            name: "x".into(),
            columns: vec!["a".into()],
            rows: vec![SweepRow {
                settings: vec!["1".into()],
                val_map: 0.5,
                test_map: 0.25,
                test_bacc: 0.75,
            }],
        };
        assert_eq!(t.to_csv(), "a,val_map,test_map,test_bacc\n1,0.500000,0.250000,0.750000\n");
        assert_eq!(t.to_markdown().lines().count(), 3);
    }

    #[test]
    fn rates_count_positives() {
        assert_eq!(positive_rates(&[[1, 0, 1], [0, 0, 1]]), [0.5, 0.0, 1.0]);
    }
}
