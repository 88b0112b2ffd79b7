//! Detection scoring: one-to-one IoU matching and mean AP over IoU thresholds.
//!
//! Masks carry no confidence scores, so AP at a threshold τ is the
//! segmentation-benchmark form `TP / (TP + FP + FN)` under greedy matching
//! with `IoU ≥ τ`, and mAP averages it over τ ∈ {0.50, 0.55, …, 0.95}.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::postprocess::InstanceMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMatch {
    pub pred_id: String,
    pub gt_id: String,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    #[serde(rename = "t")]
    pub threshold: f64,
    #[serde(rename = "tp")]
    pub true_positives: usize,
    #[serde(rename = "fp")]
    pub false_positives: usize,
    #[serde(rename = "fn")]
    pub false_negatives: usize,
    pub ap: f64,
}

impl ApResult {
    fn from_counts(threshold: f64, tp: usize, n_pred: usize, n_gt: usize) -> Self {
        let (fp, fn_) = (n_pred - tp, n_gt - tp);
        let denom = tp + fp + fn_;
        ApResult {
            threshold,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            ap: if denom == 0 {
                1.0
            } else {
                tp as f64 / denom as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub thresholds: Vec<f64>,
    pub per_threshold: Vec<ApResult>,
    #[serde(rename = "map")]
    pub mean_ap: f64,
}

/// The ten thresholds 0.50, 0.55, …, 0.95, each the double nearest its decimal.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

fn intersection_size(a: &[(u32, u32)], b: &[(u32, u32)]) -> usize {
    let key = |p: &(u32, u32)| (p.1, p.0);
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match key(&a[i]).cmp(&key(&b[j])) {
            Ordering::Less => i += 1,
            Ordering::Greater => j += 1,
            Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Intersection over union of two pixel lists sorted in raster order.
pub fn iou(a: &[(u32, u32)], b: &[(u32, u32)]) -> f64 {
    let inter = intersection_size(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Every overlapping (pred, gt) pair on the same tile, sorted by descending
/// IoU then by `(pred_id, gt_id)`.
fn candidate_pairs(pred: &[InstanceMask], gt: &[InstanceMask]) -> Vec<DetectionMatch> {
    let mut pairs = Vec::new();
    for p in pred {
        for g in gt {
            if p.tile_id != g.tile_id || !p.bbox.intersects(&g.bbox) {
                continue;
            }
            let v = iou(&p.pixels, &g.pixels);
            if v > 0.0 {
                pairs.push(DetectionMatch {
                    pred_id: p.global_id.clone(),
                    gt_id: g.global_id.clone(),
                    iou: v,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.iou
            .total_cmp(&a.iou)
            .then_with(|| a.pred_id.cmp(&b.pred_id))
            .then_with(|| a.gt_id.cmp(&b.gt_id))
    });
    pairs
}

fn greedy(pairs: &[DetectionMatch], threshold: f64) -> Vec<DetectionMatch> {
    let mut used_pred = std::collections::HashSet::new();
    let mut used_gt = std::collections::HashSet::new();
    let mut out = Vec::new();
    for m in pairs {
        if m.iou < threshold {
            break;
        }
        if used_pred.contains(m.pred_id.as_str()) || used_gt.contains(m.gt_id.as_str()) {
            continue;
        }
        used_pred.insert(m.pred_id.as_str());
        used_gt.insert(m.gt_id.as_str());
        out.push(m.clone());
    }
    out
}

/// Greedy one-to-one matching in descending IoU order, keeping pairs with
/// `IoU ≥ threshold`. Only instances on the same tile are compared.
pub fn match_instances(
    pred: &[InstanceMask],
    gt: &[InstanceMask],
    threshold: f64,
) -> Vec<DetectionMatch> {
    greedy(&candidate_pairs(pred, gt), threshold)
}

pub fn average_precision_at(
    pred: &[InstanceMask],
    gt: &[InstanceMask],
    threshold: f64,
) -> ApResult {
    let tp = match_instances(pred, gt, threshold).len();
    ApResult::from_counts(threshold, tp, pred.len(), gt.len())
}

/// Per-threshold AP and their mean; IoUs are computed once for all thresholds.
pub fn evaluate(pred: &[InstanceMask], gt: &[InstanceMask]) -> Evaluation {
    let pairs = candidate_pairs(pred, gt);
    let thresholds = iou_thresholds();
    let per_threshold: Vec<ApResult> = thresholds
        .iter()
        .map(|&t| ApResult::from_counts(t, greedy(&pairs, t).len(), pred.len(), gt.len()))
        .collect();
    let mean_ap = per_threshold.iter().map(|r| r.ap).sum::<f64>() / per_threshold.len() as f64;
    Evaluation {
        thresholds,
        per_threshold,
        mean_ap,
    }
}

pub fn mean_average_precision(pred: &[InstanceMask], gt: &[InstanceMask]) -> f64 {
    evaluate(pred, gt).mean_ap
}
