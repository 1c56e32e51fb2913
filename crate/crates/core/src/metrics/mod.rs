//! IoU, greedy detection matching, precision/recall/F1 over a confidence
//! sweep, all-point AP and mAP@K, curve files and model comparison tables.
//!
//! Degenerate counts follow fixed conventions so every curve is total:
//! precision is 1 when nothing is detected, recall is 1 when there is no
//! ground truth, and F1 is 0 when both precision and recall are 0.

mod report;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use report::{compare_models, emit_curves, ComparisonTable, CURVE_FILES};

use crate::error::{Error, Result};
use crate::inference::{detection_order, Detection};

/// Corner-form box in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxXyxy {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxXyxy {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.check()?;
        Ok(b)
    }

    fn check(&self) -> Result<()> {
        if [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
        {
            Ok(())
        } else {
            Err(Error::invalid(format!("degenerate box {self:?}")))
        }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

/// Intersection over union; rejects degenerate boxes.
pub fn iou(a: &BoxXyxy, b: &BoxXyxy) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoxXyxy, b: &BoxXyxy) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BoxXyxy,
}

/// Detections and ground truth for one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageEval {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruth>,
}

/// Per-detection TP/FP flags in ranked order, plus the unmatched GT count.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchOutcome {
    /// Detections in the ranked order the flags refer to.
    pub ranked: Vec<Detection>,
    pub true_positive: Vec<bool>,
    /// For each TP, the index of the GT it claimed.
    pub matched_gt: Vec<Option<usize>>,
    pub fn_count: usize,
}

impl MatchOutcome {
    pub fn tp(&self) -> usize {
        self.true_positive.iter().filter(|&&t| t).count()
    }

    pub fn fp(&self) -> usize {
        self.true_positive.len() - self.tp()
    }

    pub fn precision_recall_f1(&self) -> (f64, f64, f64) {
        precision_recall_f1(self.tp(), self.fp(), self.fn_count)
    }
}

/// Greedy matching in rank order: a detection is a TP if an unmatched GT of
/// its class overlaps it by at least `k`; it claims the highest-IoU such GT.
pub fn match_detections(detections: &[Detection], gts: &[GroundTruth], k: f64) -> MatchOutcome {
    let mut ranked = detections.to_vec();
    ranked.sort_by(detection_order);
    let mut taken = vec![false; gts.len()];
    let mut true_positive = Vec::with_capacity(ranked.len());
    let mut matched_gt = Vec::with_capacity(ranked.len());
    for det in &ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || gt.class_id != det.class_id {
                continue;
            }
            let v = iou_unchecked(&det.bbox, &gt.bbox);
            if v >= k && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
        }
        true_positive.push(best.is_some());
        matched_gt.push(best.map(|(g, _)| g));
    }
    MatchOutcome {
        ranked,
        true_positive,
        matched_gt,
        fn_count: taken.iter().filter(|&&t| !t).count(),
    }
}

pub fn precision_recall_f1(tp: usize, fp: usize, fn_count: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_count == 0 {
        1.0
    } else {
        tp as f64 / (tp + fn_count) as f64
    };
    (p, r, f1_score(p, r))
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// 0.00, 0.01, …, 1.00
pub fn default_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 / 100.0).collect()
}

/// Ranked (confidence, is_tp) pairs for one class or a pool of classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoredRecords {
    pub records: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl ScoredRecords {
    fn sort(&mut self) {
        self.records.sort_by(|a, b| b.0.total_cmp(&a.0));
    }

    /// Curve at each threshold, counting detections with confidence ≥ t.
    ///
    /// Greedy matching never lets a lower-ranked detection change the fate
    /// of a higher-ranked one, so filtering by a threshold yields a prefix
    /// of the full ranking with the same flags.
    pub fn sweep(&self, grid: &[f64]) -> Vec<CurvePoint> {
        let mut sorted = self.clone();
        sorted.sort();
        let mut cum_tp = Vec::with_capacity(sorted.records.len() + 1);
        cum_tp.push(0usize);
        for &(_, tp) in &sorted.records {
            cum_tp.push(cum_tp.last().unwrap() + tp as usize);
        }
        grid.iter()
            .map(|&t| {
                let n = sorted.records.partition_point(|&(c, _)| c >= t);
                let tp = cum_tp[n];
                let fp = n - tp;
                let fn_count = self.num_gt - tp;
                let (precision, recall, f1) = precision_recall_f1(tp, fp, fn_count);
                CurvePoint {
                    confidence: t,
                    precision,
                    recall,
                    f1,
                    tp,
                    fp,
                    fn_count,
                }
            })
            .collect()
    }

    /// All-point interpolated AP: precision replaced by its running maximum
    /// from the right, summed over recall increments. Zero when there is no
    /// ground truth.
    pub fn average_precision(&self) -> f64 {
        if self.num_gt == 0 {
            return 0.0;
        }
        let mut sorted = self.clone();
        sorted.sort();
        let n_gt = self.num_gt as f64;
        let mut points = Vec::with_capacity(sorted.records.len());
        let (mut tp, mut fp) = (0usize, 0usize);
        for &(_, is_tp) in &sorted.records {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            points.push((tp as f64 / n_gt, tp as f64 / (tp + fp) as f64));
        }
        let mut envelope = vec![0.0; points.len()];
        let mut running = 0.0f64;
        for i in (0..points.len()).rev() {
            running = running.max(points[i].1);
            envelope[i] = running;
        }
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for (i, &(r, _)) in points.iter().enumerate() {
            if r > prev_recall {
                ap += (r - prev_recall) * envelope[i];
                prev_recall = r;
            }
        }
        ap
    }
}

/// Matches every image and pools the ranked outcomes, optionally for a
/// single class.
pub fn collect_records(images: &[ImageEval], k: f64, class: Option<usize>) -> ScoredRecords {
    let mut out = ScoredRecords::default();
    for img in images {
        let outcome = match_detections(&img.detections, &img.ground_truth, k);
        for (det, &tp) in outcome.ranked.iter().zip(&outcome.true_positive) {
            if class.is_none_or(|c| c == det.class_id) {
                out.records.push((det.confidence, tp));
            }
        }
        out.num_gt += img
            .ground_truth
            .iter()
            .filter(|g| class.is_none_or(|c| c == g.class_id))
            .count();
    }
    out
}

/// Curve over all classes pooled together.
pub fn confidence_sweep(images: &[ImageEval], k: f64, grid: &[f64]) -> Result<Vec<CurvePoint>> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("sweep grid must be sorted ascending"));
    }
    Ok(collect_records(images, k, None).sweep(grid))
}

pub fn average_precision(images: &[ImageEval], k: f64, class: usize) -> f64 {
    collect_records(images, k, Some(class)).average_precision()
}

pub fn mean_average_precision(per_class: &[f64]) -> Result<f64> {
    if per_class.is_empty() {
        return Err(Error::invalid("mAP needs at least one class AP"));
    }
    Ok(per_class.iter().sum::<f64>() / per_class.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub model_id: String,
    pub iou_threshold: f64,
    /// (class_id, AP) for every class with ground truth.
    pub class_ap: Vec<(usize, f64)>,
    pub map: f64,
    pub curve: Vec<CurvePoint>,
    /// Curve point with the highest F1 (lowest threshold on ties).
    pub best: CurvePoint,
    pub model_size_bytes: Option<u64>,
}

impl EvaluationReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: mAP@{} {:.4} | best F1 {:.4} at conf {:.2} (P {:.4}, R {:.4}; TP {} FP {} FN {})",
            self.model_id,
            self.iou_threshold,
            self.map,
            self.best.f1,
            self.best.confidence,
            self.best.precision,
            self.best.recall,
            self.best.tp,
            self.best.fp,
            self.best.fn_count
        )
    }
}

/// Full evaluation at IoU threshold `k` over the default 101-point grid.
/// Classes without ground truth are left out of the mAP.
pub fn evaluate(
    images: &[ImageEval],
    num_classes: usize,
    k: f64,
    model_id: &str,
) -> Result<EvaluationReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images to evaluate".into()));
    }
    let class_ap: Vec<(usize, f64)> = (0..num_classes)
        .filter_map(|c| {
            let rec = collect_records(images, k, Some(c));
            (rec.num_gt > 0).then(|| (c, rec.average_precision()))
        })
        .collect();
    if class_ap.is_empty() {
        return Err(Error::EmptyDataset(
            "no ground-truth boxes to evaluate against".into(),
        ));
    }
    let aps: Vec<f64> = class_ap.iter().map(|&(_, ap)| ap).collect();
    let map = mean_average_precision(&aps)?;
    let curve = confidence_sweep(images, k, &default_grid())?;
    let best = *curve
        .iter()
        .reduce(|a, b| {
            if b.f1.partial_cmp(&a.f1) == Some(Ordering::Greater) {
                b
            } else {
                a
            }
        })
        .expect("grid is non-empty");
    Ok(EvaluationReport {
        model_id: model_id.to_string(),
        iou_threshold: k,
        class_ap,
        map,
        curve,
        best,
        model_size_bytes: None,
    })
}
