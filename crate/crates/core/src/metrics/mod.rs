//! Evaluation metrics: per-criterion average precision, balanced accuracy and
//! scene-graph triplet recall.

mod baselines;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::scenegen::Relation;

pub use baselines::{
    deepcvs_input, layoutcvs_input, BaselineClassifier, BaselineConfig, BaselineKind, BaselineOutput,
    DeepCvsReconstruction,
};

/// Precision and recall after each rank of a descending-score ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// Scores in visiting order (descending, ties in input order).
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<PrCurve> {
    check_lengths(scores, labels)?;
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric("precision-recall curve needs a positive label".into()));
    }
    let mut curve = PrCurve {
        thresholds: Vec::with_capacity(scores.len()),
        precision: Vec::with_capacity(scores.len()),
        recall: Vec::with_capacity(scores.len()),
    };
    let mut tp = 0usize;
    for (rank, &k) in ranking(scores).iter().enumerate() {
        tp += (labels[k] == 1) as usize;
        curve.thresholds.push(scores[k]);
        curve.precision.push(tp as f64 / (rank + 1) as f64);
        curve.recall.push(tp as f64 / positives as f64);
    }
    Ok(curve)
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Mean of the precision at the rank of every positive, ranking by
/// descending score with ties kept in input order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in curve.precision.iter().zip(&curve.recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-criterion AP of sigmoid scores and their mean.
pub fn cvs_map(logits: &[[f64; 3]], labels: &[[u8; 3]]) -> Result<([f64; 3], f64)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", logits.len(), labels.len())));
    }
    let mut aps = [0.0; 3];
    for c in 0..3 {
        let s: Vec<f64> = logits.iter().map(|l| sigmoid(l[c])).collect();
        let y: Vec<u8> = labels.iter().map(|l| l[c]).collect();
        aps[c] = average_precision(&s, &y).map_err(|e| Error::UndefinedMetric(format!("criterion {}: {e}", c + 1)))?;
    }
    Ok((aps, aps.iter().sum::<f64>() / 3.0))
}

/// Balanced accuracy of `logit > threshold` decisions.
pub fn balanced_accuracy_single(logits: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(logits, labels)?;
    let (mut tp, mut fn_, mut tn, mut fp) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &y) in logits.iter().zip(labels) {
        match (s > threshold, y == 1) {
            (true, true) => tp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
            (true, false) => fp += 1,
        }
    }
    if tp + fn_ == 0 || tn + fp == 0 {
        return Err(Error::UndefinedMetric("balanced accuracy needs both classes".into()));
    }
    let sens = tp as f64 / (tp + fn_) as f64;
    let spec = tn as f64 / (tn + fp) as f64;
    Ok((sens + spec) / 2.0)
}

/// Per-criterion balanced accuracy at `threshold` and the mean.
pub fn balanced_accuracy(logits: &[[f64; 3]], labels: &[[u8; 3]], threshold: f64) -> Result<([f64; 3], f64)> {
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", logits.len(), labels.len())));
    }
    let mut out = [0.0; 3];
    for c in 0..3 {
        let s: Vec<f64> = logits.iter().map(|l| l[c]).collect();
        let y: Vec<u8> = labels.iter().map(|l| l[c]).collect();
        out[c] = balanced_accuracy_single(&s, &y, threshold)
            .map_err(|e| Error::UndefinedMetric(format!("criterion {}: {e}", c + 1)))?;
    }
    Ok((out, out.iter().sum::<f64>() / 3.0))
}

/// A scored `(subject, relation, object)` prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletPrediction {
    pub subject_class: usize,
    pub object_class: usize,
    pub relation: usize,
    pub subject_box: BBox,
    pub object_box: BBox,
    pub score: f64,
}

/// Ground truth of one image for triplet recall.
#[derive(Debug, Clone, Copy)]
pub struct GtGraph<'a> {
    pub boxes: &'a [BBox],
    pub classes: &'a [usize],
    pub relations: &'a [Relation],
}

fn triplet_matches(t: &TripletPrediction, gt: &GtGraph, r: &Relation) -> bool {
    if t.relation != r.class.id() {
        return false;
    }
    let (bi, bj) = (&gt.boxes[r.i], &gt.boxes[r.j]);
    let (ci, cj) = (gt.classes[r.i], gt.classes[r.j]);
    let direct = t.subject_class == ci
        && t.object_class == cj
        && iou(&t.subject_box, bi) >= 0.5
        && iou(&t.object_box, bj) >= 0.5;
    let swapped = t.subject_class == cj
        && t.object_class == ci
        && iou(&t.subject_box, bj) >= 0.5
        && iou(&t.object_box, bi) >= 0.5;
    direct || swapped
}

/// Mean over images (with at least one ground-truth relation) of the
/// fraction of relations matched by one of the top-`k` triplets.
pub fn recall_at_k(predictions: &[Vec<TripletPrediction>], ground_truth: &[GtGraph], k: usize) -> Result<f64> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::Shape("prediction and ground-truth image counts differ".into()));
    }
    let mut total = 0.0;
    let mut images = 0usize;
    for (preds, gt) in predictions.iter().zip(ground_truth) {
        if gt.relations.is_empty() {
            continue;
        }
        let order = ranking(&preds.iter().map(|t| t.score).collect::<Vec<_>>());
        let top: Vec<&TripletPrediction> = order.iter().take(k).map(|&i| &preds[i]).collect();
        let hit = gt
            .relations
            .iter()
            .filter(|r| top.iter().any(|t| triplet_matches(t, gt, r)))
            .count();
        total += hit as f64 / gt.relations.len() as f64;
        images += 1;
    }
    if images == 0 {
        return Err(Error::UndefinedMetric("no image has ground-truth relations".into()));
    }
    Ok(total / images as f64)
}

/// Metric report written by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_criterion_ap: [f64; 3],
    pub map: f64,
    pub bacc: [f64; 3],
    pub mean_bacc: f64,
    pub recall_at_k: Option<f64>,
    pub k: usize,
    pub images: usize,
}
