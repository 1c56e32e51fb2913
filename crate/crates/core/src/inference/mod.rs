//! Head decoding, per-class NMS, and timed detection over single images,
//! frame directories and synthetic benchmark frames.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::dataset::{
    generate_synthetic, images_to_tensor, sequential_batches, AnnotatedImage, RgbImage,
};
use crate::detector::DetectorModel;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, iou_unchecked, BoxXyxy, EvaluationReport, GroundTruth, ImageEval};
use crate::tensor::ops::stable_sigmoid;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    /// Objectness times the best class probability.
    pub confidence: f64,
    pub bbox: BoxXyxy,
}

/// Confidence descending, then smaller x1, then smaller y1.
pub fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.bbox.x1.total_cmp(&b.bbox.x1))
        .then(a.bbox.y1.total_cmp(&b.bbox.y1))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub conf_threshold: f64,
    pub nms_iou_threshold: f64,
    pub max_detections: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            conf_threshold: 0.25,
            nms_iou_threshold: 0.45,
            max_detections: 300,
        }
    }
}

impl InferenceConfig {
    /// Settings used when scoring a model: keep nearly everything so the
    /// confidence sweep sees the full ranking.
    pub fn validation() -> Self {
        Self {
            conf_threshold: 0.001,
            nms_iou_threshold: 0.6,
            max_detections: 300,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |field: &str, v: f64| {
            if v > 0.0 && v < 1.0 {
                Ok(())
            } else {
                Err(Error::config(field, format!("must lie in (0, 1), got {v}")))
            }
        };
        open_unit("conf_threshold", self.conf_threshold)?;
        open_unit("nms_iou_threshold", self.nms_iou_threshold)?;
        if self.max_detections == 0 {
            return Err(Error::config("max_detections", "must be at least 1"));
        }
        Ok(())
    }
}

/// Decodes raw head maps into per-image detections at model-input scale.
///
/// For each cell and anchor: centre `(2σ(t)−0.5+grid)·stride`, size
/// `(2σ(t))²·anchor`, confidence `σ(obj)·max σ(cls)`.
pub fn decode<T: Element>(
    maps: &[Tensor<T>],
    anchors: &[[[f64; 2]; 3]],
    strides: &[usize],
    conf_threshold: f64,
) -> Result<Vec<Vec<Detection>>> {
    if maps.len() != anchors.len() || maps.len() != strides.len() || maps.is_empty() {
        return Err(Error::invalid(format!(
            "{} maps for {} anchor sets and {} strides",
            maps.len(),
            anchors.len(),
            strides.len()
        )));
    }
    let batch = maps[0].dims4()?.0;
    let mut out = vec![Vec::new(); batch];
    for ((map, anchor_set), &stride) in maps.iter().zip(anchors).zip(strides) {
        let (n, ch, gh, gw) = map.dims4()?;
        if n != batch {
            return Err(Error::shape("head maps disagree on batch size"));
        }
        if ch % 3 != 0 || ch / 3 < 6 {
            return Err(Error::shape(format!(
                "head map has {ch} channels, expected 3·(5+C)"
            )));
        }
        let per = ch / 3;
        let plane = gh * gw;
        let data = map.data();
        let sg = |v: T| stable_sigmoid(v.as_f64());
        for (b, dets) in out.iter_mut().enumerate() {
            for (a, &[aw, ah]) in anchor_set.iter().enumerate() {
                let base = (b * ch + a * per) * plane;
                let at = |k: usize, cell: usize| data[base + k * plane + cell];
                for gy in 0..gh {
                    for gx in 0..gw {
                        let cell = gy * gw + gx;
                        let obj = sg(at(4, cell));
                        if obj < conf_threshold {
                            continue;
                        }
                        let (mut cls, mut best) = (0, f64::NEG_INFINITY);
                        for c in 0..per - 5 {
                            let p = sg(at(5 + c, cell));
                            if p > best {
                                (cls, best) = (c, p);
                            }
                        }
                        let confidence = obj * best;
                        if confidence < conf_threshold {
                            continue;
                        }
                        let s = stride as f64;
                        let cx = (2.0 * sg(at(0, cell)) - 0.5 + gx as f64) * s;
                        let cy = (2.0 * sg(at(1, cell)) - 0.5 + gy as f64) * s;
                        let w = (2.0 * sg(at(2, cell))).powi(2) * aw;
                        let h = (2.0 * sg(at(3, cell))).powi(2) * ah;
                        let bbox = BoxXyxy {
                            x1: cx - w / 2.0,
                            y1: cy - h / 2.0,
                            x2: cx + w / 2.0,
                            y2: cy + h / 2.0,
                        };
                        // a collapsed size underflows to a zero-area box; drop it
                        if bbox.x2 > bbox.x1 && bbox.y2 > bbox.y1 {
                            dets.push(Detection {
                                class_id: cls,
                                confidence,
                                bbox,
                            });
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Greedy per-class suppression; output sorted by [`detection_order`].
pub fn nms(detections: &[Detection], iou_threshold: f64, max_detections: usize) -> Vec<Detection> {
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| a.class_id.cmp(&b.class_id).then(detection_order(a, b)));
    let mut kept: Vec<Detection> = Vec::new();
    let mut class_start = 0;
    for det in sorted {
        if kept
            .get(class_start)
            .is_some_and(|k| k.class_id != det.class_id)
        {
            class_start = kept.len();
        }
        if kept[class_start..]
            .iter()
            .all(|k| iou_unchecked(&k.bbox, &det.bbox) < iou_threshold)
        {
            kept.push(det);
        }
    }
    kept.sort_by(detection_order);
    kept.truncate(max_detections);
    kept
}

/// Decode and NMS for every image of a predicted batch, at model scale.
pub fn postprocess<T: Element>(
    maps: &[Tensor<T>],
    model_anchors: &[[[f64; 2]; 3]],
    strides: &[usize],
    config: &InferenceConfig,
) -> Result<Vec<Vec<Detection>>> {
    Ok(decode(maps, model_anchors, strides, config.conf_threshold)?
        .into_iter()
        .map(|d| nms(&d, config.nms_iou_threshold, config.max_detections))
        .collect())
}

/// Scores a model on labelled images at IoU 0.5, comparing at model-input
/// scale.
pub fn evaluate_model(
    model: &DetectorModel<f32>,
    images: &[AnnotatedImage],
    batch_size: usize,
    config: &InferenceConfig,
    model_id: &str,
) -> Result<EvaluationReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset("no images to evaluate".into()));
    }
    let cfg = model.config();
    let s = cfg.input_size as f64;
    let mut evals = Vec::with_capacity(images.len());
    for batch in sequential_batches(images, batch_size, cfg.input_size)? {
        let batch = batch?;
        let maps = model.predict(batch.images)?;
        let dets = postprocess(&maps, &cfg.anchors, &cfg.strides, config)?;
        for (detections, labels) in dets.into_iter().zip(&batch.labels) {
            let ground_truth = labels
                .iter()
                .map(|l| {
                    let [x1, y1, x2, y2] = l.to_pixels(s, s);
                    GroundTruth {
                        class_id: l.class_id,
                        bbox: BoxXyxy { x1, y1, x2, y2 },
                    }
                })
                .collect();
            evals.push(ImageEval {
                detections,
                ground_truth,
            });
        }
    }
    evaluate(&evals, cfg.num_classes, 0.5, model_id)
}

/// Stretches `image` to the model input, detects, and maps boxes back to
/// the original pixel grid (clamped to the frame). Returns the detections
/// and the seconds spent in forward, decode and NMS.
pub fn detect_image(
    model: &DetectorModel<f32>,
    image: &RgbImage,
    config: &InferenceConfig,
) -> Result<(Vec<Detection>, f64)> {
    let cfg = model.config();
    let size = cfg.input_size;
    let batch = images_to_tensor(&[image], size)?;
    let start = Instant::now();
    let maps = model.predict(batch)?;
    let mut dets = postprocess(&maps, &cfg.anchors, &cfg.strides, config)?.remove(0);
    let latency = start.elapsed().as_secs_f64();
    let (w, h) = (image.width() as f64, image.height() as f64);
    let (kx, ky) = (w / size as f64, h / size as f64);
    dets.retain_mut(|d| {
        let b = &mut d.bbox;
        b.x1 = (b.x1 * kx).clamp(0.0, w);
        b.x2 = (b.x2 * kx).clamp(0.0, w);
        b.y1 = (b.y1 * ky).clamp(0.0, h);
        b.y2 = (b.y2 * ky).clamp(0.0, h);
        b.x2 > b.x1 && b.y2 > b.y1
    });
    Ok((dets, latency))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimingSummary {
    pub frames: usize,
    pub total_s: f64,
    pub mean_s: f64,
    pub median_s: f64,
    pub max_s: f64,
    pub fps: f64,
}

impl TimingSummary {
    pub fn from_latencies(latencies: &[f64]) -> Self {
        let frames = latencies.len();
        if frames == 0 {
            return Self {
                frames: 0,
                total_s: 0.0,
                mean_s: 0.0,
                median_s: 0.0,
                max_s: 0.0,
                fps: 0.0,
            };
        }
        let total_s: f64 = latencies.iter().sum();
        let mut sorted = latencies.to_vec();
        sorted.sort_by(f64::total_cmp);
        let median_s = if frames % 2 == 1 {
            sorted[frames / 2]
        } else {
            (sorted[frames / 2 - 1] + sorted[frames / 2]) / 2.0
        };
        Self {
            frames,
            total_s,
            mean_s: total_s / frames as f64,
            median_s,
            max_s: sorted[frames - 1],
            fps: if total_s > 0.0 {
                frames as f64 / total_s
            } else {
                0.0
            },
        }
    }

    pub fn to_csv(&self) -> String {
        format!(
            "frames,total_s,mean_s,median_s,max_s,fps\n{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.frames, self.total_s, self.mean_s, self.median_s, self.max_s, self.fps
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame: String,
    pub detections: Vec<Detection>,
    pub latency_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceResult {
    pub frames: Vec<FrameResult>,
    /// (file, reason) for frames that could not be read.
    pub skipped: Vec<(String, String)>,
    pub summary: TimingSummary,
}

impl SequenceResult {
    pub fn detections_csv(&self) -> String {
        detections_csv(&self.frames)
    }
}

/// `frame,class_id,confidence,x1,y1,x2,y2` rows with integer pixels.
pub fn detections_csv(frames: &[FrameResult]) -> String {
    let mut out = String::from("frame,class_id,confidence,x1,y1,x2,y2\n");
    for f in frames {
        for d in &f.detections {
            let b = &d.bbox;
            let _ = writeln!(
                out,
                "{},{},{:.6},{},{},{},{}",
                f.frame,
                d.class_id,
                d.confidence,
                b.x1.round() as i64,
                b.y1.round() as i64,
                b.x2.round() as i64,
                b.y2.round() as i64
            );
        }
    }
    out
}

/// Runs [`detect_image`] over every file of `frame_dir` in lexicographic
/// order. Unreadable frames are recorded and skipped.
pub fn detect_sequence(
    model: &DetectorModel<f32>,
    frame_dir: &Path,
    config: &InferenceConfig,
) -> Result<SequenceResult> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(frame_dir).map_err(|e| Error::io(frame_dir, e))? {
        let p = entry.map_err(|e| Error::io(frame_dir, e))?.path();
        if p.is_file() {
            paths.push(p);
        }
    }
    paths.sort();
    let mut frames = Vec::new();
    let mut skipped = Vec::new();
    for p in paths {
        let name = p
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match RgbImage::read_ppm(&p) {
            Ok(img) => {
                let (detections, latency_s) = detect_image(model, &img, config)?;
                frames.push(FrameResult {
                    frame: name,
                    detections,
                    latency_s,
                });
            }
            Err(e) => skipped.push((name, e.to_string())),
        }
    }
    let latencies: Vec<f64> = frames.iter().map(|f| f.latency_s).collect();
    Ok(SequenceResult {
        summary: TimingSummary::from_latencies(&latencies),
        frames,
        skipped,
    })
}

/// Times detection over `frames` synthetic frames of `size`×`size` pixels.
pub fn bench(
    model: &DetectorModel<f32>,
    frames: usize,
    size: usize,
    seed: u64,
    config: &InferenceConfig,
) -> Result<(TimingSummary, Vec<Vec<Detection>>)> {
    let images = generate_synthetic(frames, size, seed)?;
    let mut latencies = Vec::with_capacity(frames);
    let mut results = Vec::with_capacity(frames);
    for item in &images {
        let (d, t) = detect_image(model, &item.image, config)?;
        latencies.push(t);
        results.push(d);
    }
    Ok((TimingSummary::from_latencies(&latencies), results))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(class_id: usize, confidence: f64, x1: f64, y1: f64, x2: f64, y2: f64) -> Detection {
        Detection {
            class_id,
            confidence,
            bbox: BoxXyxy { x1, y1, x2, y2 },
        }
    }

    fn one_scale_map(g: usize, fill: f32) -> Tensor<f32> {
        Tensor::full(vec![1, 18, g, g], fill).unwrap()
    }

    const ANCHORS: [[[f64; 2]; 3]; 1] = [[[16.0, 30.0], [10.0, 13.0], [33.0, 23.0]]];

    #[test]
    fn saturated_negative_logits_decode_to_nothing() {
        let d = decode(&[one_scale_map(4, -100.0)], &ANCHORS, &[8], 1e-4).unwrap();
        assert!(d[0].is_empty());
    }

    #[test]
    fn zero_logits_give_quarter_confidence() {
        let d = decode(&[one_scale_map(2, 0.0)], &ANCHORS, &[8], 0.0).unwrap();
        assert_eq!(d[0].len(), 12);
        assert!(d[0].iter().all(|x| x.confidence == 0.25));
        assert!(decode(&[one_scale_map(2, 0.0)], &ANCHORS, &[8], 0.3).unwrap()[0].is_empty());
    }

    #[test]
    fn hand_decoded_cell() {
        let mut m = one_scale_map(3, -100.0);
        {
            let data = m.data_mut();
            for k in 0..4 {
                data[k * 9] = 0.0;
            }
            data[4 * 9] = 100.0;
            data[5 * 9] = 100.0;
        }
        let d = decode(&[m], &ANCHORS, &[8], 0.5).unwrap();
        assert_eq!(d[0].len(), 1);
        let x = d[0][0];
        assert!((x.confidence - 1.0).abs() < 1e-12);
        let (cx, cy) = ((x.bbox.x1 + x.bbox.x2) / 2.0, (x.bbox.y1 + x.bbox.y2) / 2.0);
        assert!((cx - 4.0).abs() < 1e-9 && (cy - 4.0).abs() < 1e-9);
        assert!((x.bbox.width() - 16.0).abs() < 1e-9 && (x.bbox.height() - 30.0).abs() < 1e-9);
    }

    #[test]
    fn decode_rejects_mismatched_scales() {
        assert!(decode(
            &[one_scale_map(2, 0.0)],
            &[ANCHORS[0], ANCHORS[0]],
            &[8],
            0.1
        )
        .is_err());
        let bad = Tensor::<f32>::full(vec![1, 17, 2, 2], 0.0).unwrap();
        assert!(decode(&[bad], &ANCHORS, &[8], 0.1).is_err());
    }

    #[test]
    fn nms_examples() {
        let a = det(0, 0.9, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a], 0.45, 300), vec![a]);
        let b = det(0, 0.8, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, a], 0.45, 300), vec![a]);
        let c = det(0, 0.8, 20.0, 20.0, 30.0, 30.0);
        assert_eq!(nms(&[c, a], 0.45, 300), vec![a, c]);
        let other_class = det(1, 0.8, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[other_class, a], 0.45, 300), vec![a, other_class]);
        assert_eq!(nms(&[c, a], 0.45, 1), vec![a]);
    }

    #[test]
    fn ties_break_by_coordinates() {
        let a = det(0, 0.5, 5.0, 0.0, 15.0, 10.0);
        let b = det(0, 0.5, 0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[a, b], 0.3, 300), vec![b]);
    }

    #[test]
    fn timing_identities() {
        let t = TimingSummary::from_latencies(&[0.1, 0.3, 0.2]);
        assert_eq!(t.frames, 3);
        assert!((t.mean_s - t.total_s / 3.0).abs() < 1e-15);
        assert_eq!((t.median_s, t.max_s), (0.2, 0.3));
        assert!((t.fps - 3.0 / t.total_s).abs() < 1e-12);
        assert_eq!(TimingSummary::from_latencies(&[]).frames, 0);
        assert!(t
            .to_csv()
            .starts_with("frames,total_s,mean_s,median_s,max_s,fps\n3,"));
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (
                0usize..2,
                0.0..1.0f64,
                0.0..40.0f64,
                0.0..40.0f64,
                1.0..20.0f64,
                1.0..20.0f64,
            ),
            0..25,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(c, p, x, y, w, h)| det(c, p, x, y, x + w, y + h))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn nms_idempotent_and_separated(dets in arb_dets(), thr in 0.1..0.9f64) {
            let once = nms(&dets, thr, 300);
            prop_assert_eq!(nms(&once, thr, 300), once.clone());
            for w in once.windows(2) {
                prop_assert!(w[0].confidence >= w[1].confidence);
            }
            for (i, a) in once.iter().enumerate() {
                for b in &once[i + 1..] {
                    if a.class_id == b.class_id {
                        prop_assert!(iou_unchecked(&a.bbox, &b.bbox) < thr);
                    }
                }
            }
        }

        #[test]
        fn threshold_commutes_with_decode(
            vals in prop::collection::vec(-6.0..6.0f32, 18 * 9),
            t in 0.0..1.0f64,
        ) {
            let m = Tensor::new(vec![1, 18, 3, 3], vals).unwrap();
            let all = decode(std::slice::from_ref(&m), &ANCHORS, &[8], 0.0).unwrap().remove(0);
            let direct = decode(&[m], &ANCHORS, &[8], t).unwrap().remove(0);
            let filtered: Vec<_> = all.into_iter().filter(|d| d.confidence >= t).collect();
            prop_assert_eq!(direct, filtered);
        }
    }
}
