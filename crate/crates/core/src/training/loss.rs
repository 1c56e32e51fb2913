use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::BoxLabel;
use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::ops::{self, stable_sigmoid};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    None,
    Mean,
    Sum,
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::None => "none",
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

impl std::str::FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Reduction::None),
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            other => Err(Error::config(
                "reduction",
                format!("unknown reduction `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Positive-term weight per class; a single value applies to every class.
    pub pos_weight: Vec<f64>,
    pub sample_weight: f64,
    pub reduction: Reduction,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
    pub lambda_box: f64,
    pub anchor_ratio_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            pos_weight: vec![1.0],
            sample_weight: 1.0,
            reduction: Reduction::Mean,
            lambda_obj: 1.0,
            lambda_cls: 0.5,
            lambda_box: 0.05,
            anchor_ratio_threshold: 4.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.pos_weight.is_empty()
            || self.pos_weight.iter().any(|&p| !(p > 0.0 && p.is_finite()))
        {
            return Err(Error::config("pos_weight", "every entry must be positive"));
        }
        if self.pos_weight.len() != 1 && self.pos_weight.len() != num_classes {
            return Err(Error::config(
                "pos_weight",
                format!(
                    "needs 1 or {num_classes} entries, got {}",
                    self.pos_weight.len()
                ),
            ));
        }
        if !(self.sample_weight > 0.0 && self.sample_weight.is_finite()) {
            return Err(Error::config("sample_weight", "must be positive"));
        }
        let lambdas = [self.lambda_obj, self.lambda_cls, self.lambda_box];
        if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::config(
                "lambda",
                "balance weights must be non-negative",
            ));
        }
        if lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::config(
                "lambda",
                "balance weights must not all be zero",
            ));
        }
        if !(self.anchor_ratio_threshold > 1.0) {
            return Err(Error::config("anchor_ratio_threshold", "must exceed 1"));
        }
        Ok(())
    }

    pub fn pos_weight_for(&self, class: usize) -> f64 {
        if self.pos_weight.len() == 1 {
            self.pos_weight[0]
        } else {
            self.pos_weight[class]
        }
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Elementwise `−w[p·y·log σ(x) + (1−y)·log(1−σ(x))]`, in the stable form
/// `w[p·y·softplus(−x) + (1−y)·softplus(x)]`.
pub fn bce_with_logits_value(x: f64, y: f64, w: f64, p: f64) -> f64 {
    w * (p * y * softplus(-x) + (1.0 - y) * softplus(x))
}

/// BCE-with-logits against constant targets. `Reduction::None` returns the
/// elementwise losses with the logits' shape; the others a scalar.
pub fn bce_with_logits<T: Element>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[f64],
    sample_weight: f64,
    pos_weight: f64,
    reduction: Reduction,
) -> Result<Var> {
    let x = tape.value(logits);
    if x.numel() != targets.len() {
        return Err(Error::shape(format!(
            "bce: {} logits vs {} targets",
            x.numel(),
            targets.len()
        )));
    }
    if let Some(bad) = targets.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::invalid(format!("bce target {bad} outside [0, 1]")));
    }
    if !(pos_weight > 0.0) {
        return Err(Error::invalid("pos_weight must be positive"));
    }
    let (w, p) = (sample_weight, pos_weight);
    let values: Vec<f64> = x
        .data()
        .iter()
        .zip(targets)
        .map(|(&xi, &y)| bce_with_logits_value(xi.as_f64(), y, w, p))
        .collect();
    let n = values.len();
    let (out, per_elem_scale) = match reduction {
        Reduction::None => (
            Tensor::new(
                x.shape().to_vec(),
                values.iter().map(|&v| T::of_f64(v)).collect(),
            )?,
            None,
        ),
        Reduction::Sum => (Tensor::scalar(T::of_f64(values.iter().sum())), Some(1.0)),
        Reduction::Mean => (
            Tensor::scalar(T::of_f64(values.iter().sum::<f64>() / n as f64)),
            Some(1.0 / n as f64),
        ),
    };
    let targets: Arc<Vec<f64>> = Arc::new(targets.to_vec());
    Ok(tape.record(
        out,
        &[logits],
        Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            let g = ctx.grad_output;
            let grad = x
                .iter()
                .zip(targets.iter())
                .enumerate()
                .map(|(i, (&xi, &y))| {
                    let s = stable_sigmoid(xi.as_f64());
                    let d = w * ((1.0 - y) * s - p * y * (1.0 - s));
                    let upstream = match per_elem_scale {
                        None => g[i].as_f64(),
                        Some(k) => g[0].as_f64() * k,
                    };
                    T::of_f64(d * upstream)
                })
                .collect();
            vec![Some(grad)]
        }),
    ))
}

/// `1 − IoU` of two centre-form boxes (cx, cy, w, h).
pub fn iou_box_loss(pred: [f64; 4], gt: [f64; 4]) -> Result<f64> {
    if pred[2] <= 0.0 || pred[3] <= 0.0 || gt[2] <= 0.0 || gt[3] <= 0.0 {
        return Err(Error::invalid("box dimensions must be positive"));
    }
    Ok(1.0 - iou_xywh(pred, gt))
}

fn corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

fn iou_xywh(a: [f64; 4], b: [f64; 4]) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Where a positive prediction sits and what it must match.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxTarget {
    pub grid_x: usize,
    pub grid_y: usize,
    pub anchor: [f64; 2],
    pub stride: f64,
    /// Ground truth (cx, cy, w, h) in input pixels.
    pub gt: [f64; 4],
}

impl BoxTarget {
    /// Decoded (cx, cy, w, h) for raw offsets (tx, ty, tw, th).
    pub fn decode(&self, t: [f64; 4]) -> [f64; 4] {
        let s = t.map(stable_sigmoid);
        [
            (2.0 * s[0] - 0.5 + self.grid_x as f64) * self.stride,
            (2.0 * s[1] - 0.5 + self.grid_y as f64) * self.stride,
            (2.0 * s[2]).powi(2) * self.anchor[0],
            (2.0 * s[3]).powi(2) * self.anchor[1],
        ]
    }
}

/// Decodes raw offsets (4 per target, flat) and returns `1 − IoU` per target.
pub fn box_iou_loss<T: Element>(
    tape: &mut Tape<T>,
    raw: Var,
    targets: Arc<Vec<BoxTarget>>,
) -> Result<Var> {
    let data = tape.value(raw).data();
    if data.len() != 4 * targets.len() || targets.is_empty() {
        return Err(Error::shape(format!(
            "box loss: {} raw values for {} targets",
            data.len(),
            targets.len()
        )));
    }
    let t4 = |d: &[T], i: usize| [0, 1, 2, 3].map(|k| d[4 * i + k].as_f64());
    let losses: Vec<T> = targets
        .iter()
        .enumerate()
        .map(|(i, tg)| T::of_f64(1.0 - iou_xywh(tg.decode(t4(data, i)), tg.gt)))
        .collect();
    let out = Tensor::new(vec![targets.len()], losses)?;
    Ok(tape.record(
        out,
        &[raw],
        Box::new(move |ctx| {
            let d = ctx.inputs[0].data();
            let mut grad = vec![T::zero(); d.len()];
            for (i, tg) in targets.iter().enumerate() {
                let t = t4(d, i);
                let g = ctx.grad_output[i].as_f64();
                let dt = iou_grad(tg, t);
                for k in 0..4 {
                    // loss is 1 − IoU
                    grad[4 * i + k] = T::of_f64(-g * dt[k]);
                }
            }
            vec![Some(grad)]
        }),
    ))
}

/// d IoU / d (tx, ty, tw, th).
fn iou_grad(tg: &BoxTarget, t: [f64; 4]) -> [f64; 4] {
    let [cx, cy, w, h] = tg.decode(t);
    let p = corners([cx, cy, w, h]);
    let q = corners(tg.gt);
    let iw = p[2].min(q[2]) - p[0].max(q[0]);
    let ih = p[3].min(q[3]) - p[1].max(q[1]);
    if iw <= 0.0 || ih <= 0.0 {
        return [0.0; 4];
    }
    let inter = iw * ih;
    let area_p = w * h;
    let union = area_p + tg.gt[2] * tg.gt[3] - inter;
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);
    // partials of the intersection w.r.t. the predicted corners
    let di_x1 = if p[0] > q[0] { -ih } else { 0.0 };
    let di_x2 = if p[2] < q[2] { ih } else { 0.0 };
    let di_y1 = if p[1] > q[1] { -iw } else { 0.0 };
    let di_y2 = if p[3] < q[3] { iw } else { 0.0 };
    let g_x1 = d_inter * di_x1 - d_area * h;
    let g_x2 = d_inter * di_x2 + d_area * h;
    let g_y1 = d_inter * di_y1 - d_area * w;
    let g_y2 = d_inter * di_y2 + d_area * w;
    let g_cx = g_x1 + g_x2;
    let g_cy = g_y1 + g_y2;
    let g_w = (g_x2 - g_x1) / 2.0;
    let g_h = (g_y2 - g_y1) / 2.0;
    let s = t.map(stable_sigmoid);
    let ds = s.map(|v| v * (1.0 - v));
    [
        g_cx * 2.0 * tg.stride * ds[0],
        g_cy * 2.0 * tg.stride * ds[1],
        g_w * 8.0 * s[2] * ds[2] * tg.anchor[0],
        g_h * 8.0 * s[3] * ds[3] * tg.anchor[1],
    ]
}

/// One anchor/cell made responsible for a ground-truth box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Positive {
    pub image: usize,
    pub grid_x: usize,
    pub grid_y: usize,
    pub anchor: usize,
    pub gt_index: usize,
    pub class_id: usize,
    /// Ground truth (cx, cy, w, h) in input pixels.
    pub gt_box: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetAssignment {
    pub batch: usize,
    pub grid_sizes: [usize; 3],
    /// Positives per scale (strides 8, 16, 32).
    pub scales: [Vec<Positive>; 3],
}

impl TargetAssignment {
    pub fn num_positives(&self) -> usize {
        self.scales.iter().map(Vec::len).sum()
    }

    /// Flat objectness target per scale, laid out as (image, anchor, y, x).
    pub fn objectness_targets(&self, scale: usize) -> Vec<f64> {
        let g = self.grid_sizes[scale];
        let mut t = vec![0.0; self.batch * 3 * g * g];
        for p in &self.scales[scale] {
            t[((p.image * 3 + p.anchor) * g + p.grid_y) * g + p.grid_x] = 1.0;
        }
        t
    }
}

fn anchor_ratio(w: f64, h: f64, a: [f64; 2]) -> f64 {
    (w / a[0]).max(a[0] / w).max(h / a[1]).max(a[1] / h)
}

/// Anchors whose per-dimension size ratio to a box stays under the
/// threshold become positive at the cell holding the box centre; a box no
/// anchor accepts falls back to its single best-ratio anchor.
pub fn assign_targets(
    labels: &[Vec<BoxLabel>],
    model: &ModelConfig,
    loss: &LossConfig,
) -> Result<TargetAssignment> {
    let s = model.input_size as f64;
    let grid_sizes = model.grid_sizes();
    let mut scales: [Vec<Positive>; 3] = Default::default();
    for (image, boxes) in labels.iter().enumerate() {
        for (gt_index, b) in boxes.iter().enumerate() {
            let inside = |v: f64| (0.0..=1.0).contains(&v);
            if !(inside(b.cx) && inside(b.cy) && b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0)
            {
                return Err(Error::invalid(format!(
                    "ground-truth box {b:?} outside [0, 1]"
                )));
            }
            if b.class_id >= model.num_classes {
                return Err(Error::invalid(format!(
                    "class {} out of range for {} classes",
                    b.class_id, model.num_classes
                )));
            }
            let (w, h) = (b.w * s, b.h * s);
            let mut best: Option<(f64, usize, usize)> = None;
            let mut matched = false;
            for (si, anchors) in model.anchors.iter().enumerate() {
                for (ai, &a) in anchors.iter().enumerate() {
                    let r = anchor_ratio(w, h, a);
                    if best.is_none_or(|(br, _, _)| r < br) {
                        best = Some((r, si, ai));
                    }
                    if r < loss.anchor_ratio_threshold {
                        matched = true;
                        scales[si].push(positive(image, gt_index, b, ai, grid_sizes[si], s));
                    }
                }
            }
            if !matched {
                let (_, si, ai) = best.expect("nine anchors");
                scales[si].push(positive(image, gt_index, b, ai, grid_sizes[si], s));
            }
        }
    }
    Ok(TargetAssignment {
        batch: labels.len(),
        grid_sizes,
        scales,
    })
}

fn positive(
    image: usize,
    gt_index: usize,
    b: &BoxLabel,
    anchor: usize,
    g: usize,
    s: f64,
) -> Positive {
    let cell = |v: f64| ((v * g as f64).floor() as usize).min(g - 1);
    Positive {
        image,
        grid_x: cell(b.cx),
        grid_y: cell(b.cy),
        anchor,
        gt_index,
        class_id: b.class_id,
        gt_box: [b.cx * s, b.cy * s, b.w * s, b.h * s],
    }
}

/// Weighted total (on the tape) and its unweighted components.
pub struct LossBreakdown {
    pub total: Var,
    pub objectness: f64,
    pub class: f64,
    pub box_loss: f64,
}

/// Compound loss over the three raw maps of a train-mode forward pass.
///
/// Objectness is BCE over every anchor/cell of every scale; the class term
/// is BCE at positives against one-hot targets; the box term is the mean of
/// `1 − IoU` at positives. Both positive-only terms are zero when the batch
/// has no positives.
pub fn compute_loss<T: Element>(
    tape: &mut Tape<T>,
    maps: &[Var; 3],
    assignment: &TargetAssignment,
    model: &ModelConfig,
    loss: &LossConfig,
) -> Result<LossBreakdown> {
    let per = model.outputs_per_anchor();
    let nc = model.num_classes;
    let mut obj_parts = Vec::with_capacity(3);
    let mut obj_targets = Vec::new();
    let mut box_parts = Vec::new();
    let mut box_targets = Vec::new();
    let mut cls_parts: Vec<Vec<Var>> = vec![Vec::new(); nc];
    let mut cls_targets: Vec<Vec<f64>> = vec![Vec::new(); nc];
    for (si, &map) in maps.iter().enumerate() {
        let (n, ch, gh, gw) = tape.value(map).dims4()?;
        let g = assignment.grid_sizes[si];
        if n != assignment.batch || ch != 3 * per || gh != g || gw != g {
            return Err(Error::shape(format!(
                "scale {si}: map {:?} does not fit assignment (batch {}, grid {g})",
                tape.value(map).shape(),
                assignment.batch
            )));
        }
        let plane = g * g;
        let flat =
            |img: usize, a: usize, k: usize, cell: usize| (img * ch + a * per + k) * plane + cell;
        let mut idx = Vec::with_capacity(n * 3 * plane);
        for img in 0..n {
            for a in 0..3 {
                idx.extend((0..plane).map(|cell| flat(img, a, 4, cell)));
            }
        }
        obj_parts.push(ops::gather(tape, map, Arc::new(idx))?);
        obj_targets.extend(assignment.objectness_targets(si));

        let positives = &assignment.scales[si];
        if positives.is_empty() {
            continue;
        }
        let cell = |p: &Positive| p.grid_y * g + p.grid_x;
        let bidx: Vec<usize> = positives
            .iter()
            .flat_map(|p| (0..4).map(move |k| flat(p.image, p.anchor, k, cell(p))))
            .collect();
        box_parts.push(ops::gather(tape, map, Arc::new(bidx))?);
        let stride = model.strides[si] as f64;
        box_targets.extend(positives.iter().map(|p| BoxTarget {
            grid_x: p.grid_x,
            grid_y: p.grid_y,
            anchor: model.anchors[si][p.anchor],
            stride,
            gt: p.gt_box,
        }));
        for c in 0..nc {
            let cidx: Vec<usize> = positives
                .iter()
                .map(|p| flat(p.image, p.anchor, 5 + c, cell(p)))
                .collect();
            cls_parts[c].push(ops::gather(tape, map, Arc::new(cidx))?);
            cls_targets[c].extend(
                positives
                    .iter()
                    .map(|p| if p.class_id == c { 1.0 } else { 0.0 }),
            );
        }
    }

    let obj_logits = ops::concat_flat(tape, &obj_parts)?;
    let obj = bce_with_logits(
        tape,
        obj_logits,
        &obj_targets,
        loss.sample_weight,
        1.0,
        loss.reduction,
    )?;
    let obj = reduce(tape, obj, loss.reduction);

    let (cls, bx) = if box_targets.is_empty() {
        let zero = |tape: &mut Tape<T>| tape.constant(Tensor::scalar(T::zero()));
        (zero(tape), zero(tape))
    } else {
        let count = box_targets.len();
        let mut per_class = Vec::with_capacity(nc);
        for c in 0..nc {
            let logits = ops::concat_flat(tape, &cls_parts[c])?;
            let l = bce_with_logits(
                tape,
                logits,
                &cls_targets[c],
                loss.sample_weight,
                loss.pos_weight_for(c),
                Reduction::Sum,
            )?;
            per_class.push(l);
        }
        let mut cls = per_class[0];
        for &l in &per_class[1..] {
            cls = ops::add(tape, cls, l)?;
        }
        let raw = ops::concat_flat(tape, &box_parts)?;
        let per_box = box_iou_loss(tape, raw, Arc::new(box_targets))?;
        match loss.reduction {
            Reduction::Mean => (
                ops::scale(tape, cls, T::of_f64(1.0 / (count * nc) as f64)),
                ops::mean(tape, per_box),
            ),
            _ => (cls, ops::sum(tape, per_box)),
        }
    };

    let value = |tape: &Tape<T>, v: Var| tape.value(v).data()[0].as_f64();
    let (o, c, b) = (value(tape, obj), value(tape, cls), value(tape, bx));
    let wo = ops::scale(tape, obj, T::of_f64(loss.lambda_obj));
    let wc = ops::scale(tape, cls, T::of_f64(loss.lambda_cls));
    let wb = ops::scale(tape, bx, T::of_f64(loss.lambda_box));
    let partial = ops::add(tape, wo, wc)?;
    let total = ops::add(tape, partial, wb)?;
    Ok(LossBreakdown {
        total,
        objectness: o,
        class: c,
        box_loss: b,
    })
}

/// Elementwise output collapses to its sum so the total stays a scalar.
fn reduce<T: Element>(tape: &mut Tape<T>, v: Var, reduction: Reduction) -> Var {
    match reduction {
        Reduction::None => ops::sum(tape, v),
        _ => v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Preset;
    use proptest::prelude::*;

    fn naive(x: f64, y: f64, w: f64, p: f64) -> f64 {
        let s = 1.0 / (1.0 + (-x).exp());
        -w * (p * y * s.ln() + (1.0 - y) * (1.0 - s).ln())
    }

    #[test]
    fn bce_spot_values() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_with_logits_value(0.0, 1.0, 1.0, 1.0) - ln2).abs() < 1e-12);
        assert!((bce_with_logits_value(0.0, 1.0, 1.0, 2.0) - 2.0 * ln2).abs() < 1e-12);
        for x in [-100.0, 100.0] {
            for y in [0.0, 1.0] {
                assert!(bce_with_logits_value(x, y, 1.0, 1.0).is_finite());
            }
        }
    }

    #[test]
    fn bce_reductions() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(
            Tensor::new(vec![2], vec![0.0, 0.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let ln2 = std::f64::consts::LN_2;
        let s = bce_with_logits(&mut tape, x, &[1.0, 0.0], 1.0, 1.0, Reduction::Sum).unwrap();
        let m = bce_with_logits(&mut tape, x, &[1.0, 0.0], 1.0, 1.0, Reduction::Mean).unwrap();
        let n = bce_with_logits(&mut tape, x, &[1.0, 0.0], 1.0, 1.0, Reduction::None).unwrap();
        assert!((tape.value(s).data()[0] - 2.0 * ln2).abs() < 1e-12);
        assert!((tape.value(m).data()[0] - ln2).abs() < 1e-12);
        assert_eq!(tape.value(n).shape(), &[2]);
        assert!(bce_with_logits(&mut tape, x, &[1.5, 0.0], 1.0, 1.0, Reduction::Sum).is_err());
        assert!(bce_with_logits(&mut tape, x, &[1.0], 1.0, 1.0, Reduction::Sum).is_err());
    }

    #[test]
    fn box_loss_examples() {
        let b = [10.0, 10.0, 4.0, 4.0];
        assert_eq!(iou_box_loss(b, b).unwrap(), 0.0);
        assert_eq!(iou_box_loss(b, [100.0, 100.0, 4.0, 4.0]).unwrap(), 1.0);
        let l = iou_box_loss([1.0, 1.0, 2.0, 2.0], [2.0, 2.0, 2.0, 2.0]).unwrap();
        assert!((l - 6.0 / 7.0).abs() < 1e-12);
        assert!(iou_box_loss([1.0, 1.0, 0.0, 2.0], b).is_err());
    }

    #[test]
    fn assignment_examples() {
        let model = ModelConfig::from_preset(Preset::N, 1, 416);
        let loss = LossConfig::default();
        let [aw, ah] = model.anchors[2][1];
        let b = BoxLabel::new(0, 0.5, 0.5, aw / 416.0, ah / 416.0).unwrap();
        let a = assign_targets(&[vec![b]], &model, &loss).unwrap();
        let hit = a.scales[2].iter().find(|p| p.anchor == 1).unwrap();
        assert_eq!((hit.grid_x, hit.grid_y), (6, 6));

        let mut tight = loss.clone();
        tight.anchor_ratio_threshold = 1.0001;
        let huge = BoxLabel::new(0, 0.5, 0.5, 1.0, 1.0).unwrap();
        let mut small = model.clone();
        small.anchors = [[[1.0, 1.0]; 3]; 3];
        let a = assign_targets(&[vec![huge]], &small, &tight).unwrap();
        assert_eq!(a.num_positives(), 1);
    }

    #[test]
    fn empty_batch_loss_is_objectness_only() {
        let model = ModelConfig::from_preset(Preset::N, 1, 64);
        let loss = LossConfig::default();
        let mut tape = Tape::<f64>::new();
        let maps = model.grid_sizes().map(|g| {
            tape.leaf(
                Tensor::full(vec![1, 18, g, g], -100.0)
                    .unwrap()
                    .with_requires_grad(true),
            )
        });
        let a = assign_targets(&[vec![]], &model, &loss).unwrap();
        let l = compute_loss(&mut tape, &maps, &a, &model, &loss).unwrap();
        assert_eq!((l.class, l.box_loss), (0.0, 0.0));
        assert!(l.objectness < 1e-10);
    }

    proptest! {
        #[test]
        fn stable_matches_naive(x in -10.0..10.0f64, y in 0.0..=1.0f64, p in 0.1..5.0f64, w in 0.1..3.0f64) {
            prop_assert!((bce_with_logits_value(x, y, w, p) - naive(x, y, w, p)).abs() < 1e-6);
        }

        #[test]
        fn pos_weight_monotone(x in -20.0..20.0f64, p in 0.1..5.0f64, dp in 0.01..2.0f64) {
            prop_assert!(bce_with_logits_value(x, 1.0, 1.0, p + dp) > bce_with_logits_value(x, 1.0, 1.0, p));
            prop_assert_eq!(bce_with_logits_value(x, 0.0, 1.0, p + dp), bce_with_logits_value(x, 0.0, 1.0, p));
        }
    }
}
