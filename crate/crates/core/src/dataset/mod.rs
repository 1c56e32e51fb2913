//! YOLO-format data: label parsing, directory ingestion with rejection
//! reporting, stretch resizing, seeded splitting and batching, plus a
//! synthetic fire-blob generator.

mod image;
mod synthetic;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use image::RgbImage;
pub use synthetic::{generate_background, generate_synthetic, BLOB_SIZE_RANGE};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance within which slightly out-of-frame labels are clamped instead of
/// rejected.
pub const LABEL_CLAMP_TOLERANCE: f64 = 1e-3;

/// Ground-truth box, normalized to image width and height.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxLabel {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxLabel {
    /// Validates a box, clamping it into the frame when it overshoots by at
    /// most [`LABEL_CLAMP_TOLERANCE`].
    pub fn new(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::invalid(format!(
                "box size must be positive, got {w}×{h}"
            )));
        }
        let tol = LABEL_CLAMP_TOLERANCE;
        let (x1, x2) = (cx - w / 2.0, cx + w / 2.0);
        let (y1, y2) = (cy - h / 2.0, cy + h / 2.0);
        if x1 < -tol || y1 < -tol || x2 > 1.0 + tol || y2 > 1.0 + tol {
            return Err(Error::invalid(format!(
                "box ({cx}, {cy}, {w}, {h}) leaves the image"
            )));
        }
        let inside = |v: f64| (-1e-6..=1.0 + 1e-6).contains(&v);
        if [x1, x2, y1, y2].iter().all(|&v| inside(v)) {
            return Ok(Self {
                class_id,
                cx,
                cy,
                w,
                h,
            });
        }
        let (x1, x2) = (x1.clamp(0.0, 1.0), x2.clamp(0.0, 1.0));
        let (y1, y2) = (y1.clamp(0.0, 1.0), y2.clamp(0.0, 1.0));
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::invalid("box collapses after clamping"));
        }
        Ok(Self {
            class_id,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        })
    }

    /// Parses one `class_id cx cy w h` line.
    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::invalid(format!(
                "expected 5 fields `class_id cx cy w h`, got {}",
                fields.len()
            )));
        }
        let class_id = fields[0]
            .parse::<usize>()
            .map_err(|_| Error::invalid(format!("bad class id `{}`", fields[0])))?;
        let mut nums = [0.0; 4];
        for (n, f) in nums.iter_mut().zip(&fields[1..]) {
            *n = f
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number `{f}`")))?;
        }
        Self::new(class_id, nums[0], nums[1], nums[2], nums[3])
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            self.class_id, self.cx, self.cy, self.w, self.h
        )
    }

    /// Corner form (x1, y1, x2, y2) in pixels of a `width`×`height` image.
    pub fn to_pixels(&self, width: f64, height: f64) -> [f64; 4] {
        [
            (self.cx - self.w / 2.0) * width,
            (self.cy - self.h / 2.0) * height,
            (self.cx + self.w / 2.0) * width,
            (self.cy + self.h / 2.0) * height,
        ]
    }
}

/// Parses a whole label file; any bad line rejects the file.
pub fn parse_label_file(text: &str) -> Result<Vec<BoxLabel>> {
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        labels.push(
            BoxLabel::parse(line).map_err(|e| Error::invalid(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image: RgbImage,
    pub labels: Vec<BoxLabel>,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub file: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub images: Vec<AnnotatedImage>,
    pub rejections: Vec<Rejection>,
}

impl LoadReport {
    pub fn scanned(&self) -> usize {
        self.images.len() + self.rejections.len()
    }

    /// `filename,reason` CSV with a header row.
    pub fn rejection_csv(&self) -> String {
        let mut out = String::from("filename,reason\n");
        for r in &self.rejections {
            let _ = writeln!(out, "{},{}", r.file, r.reason.replace([',', '\n'], ";"));
        }
        out
    }
}

/// Standard `images/` + `labels/` layout under one root.
pub fn dataset_dirs(root: &Path) -> (PathBuf, PathBuf) {
    (root.join("images"), root.join("labels"))
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Loads every image in `image_dir` with its `label_dir/<stem>.txt`.
///
/// Images without a usable annotation are reported, not returned.
pub fn load_dataset(image_dir: &Path, label_dir: &Path) -> Result<LoadReport> {
    if !label_dir.is_dir() {
        return Err(Error::io(
            label_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "label directory not found"),
        ));
    }
    let mut report = LoadReport::default();
    for path in sorted_files(image_dir)? {
        let file = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        match load_one(&path, label_dir) {
            Ok((image, labels)) => report.images.push(AnnotatedImage {
                image,
                labels,
                source_id: file,
            }),
            Err(reason) => report.rejections.push(Rejection { file, reason }),
        }
    }
    Ok(report)
}

fn load_one(
    path: &Path,
    label_dir: &Path,
) -> std::result::Result<(RgbImage, Vec<BoxLabel>), String> {
    if !is_ppm(path) {
        return Err("unsupported image format (expected .ppm)".into());
    }
    let stem = path
        .file_stem()
        .ok_or("file has no stem")?
        .to_string_lossy()
        .into_owned();
    let label_path = label_dir.join(format!("{stem}.txt"));
    let text = match fs::read_to_string(&label_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err("missing label file".into())
        }
        Err(e) => return Err(format!("unreadable label file: {e}")),
    };
    let labels = parse_label_file(&text).map_err(|e| match e {
        Error::InvalidArgument(m) => format!("malformed label {m}"),
        other => other.to_string(),
    })?;
    if labels.is_empty() {
        return Err("empty label file".into());
    }
    let image = RgbImage::read_ppm(path).map_err(|e| match e {
        Error::Format { reason, .. } => format!("unreadable image: {reason}"),
        other => format!("unreadable image: {other}"),
    })?;
    Ok((image, labels))
}

/// Writes images and labels in the standard layout under `root`.
pub fn write_dataset(images: &[AnnotatedImage], root: &Path) -> Result<()> {
    let (img_dir, lbl_dir) = dataset_dirs(root);
    for d in [&img_dir, &lbl_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for item in images {
        let stem = Path::new(&item.source_id)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| item.source_id.clone());
        item.image.write_ppm(&img_dir.join(format!("{stem}.ppm")))?;
        let mut text = String::new();
        for l in &item.labels {
            text.push_str(&l.to_line());
            text.push('\n');
        }
        let p = lbl_dir.join(format!("{stem}.txt"));
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Stretches the pixels to `target`×`target`; normalized labels are
/// unaffected by a stretch and are carried over unchanged.
pub fn stretch_resize(image: &AnnotatedImage, target: usize) -> Result<AnnotatedImage> {
    if target == 0 || target % 2 != 0 {
        return Err(Error::invalid(format!(
            "stretch target must be even and positive, got {target}"
        )));
    }
    Ok(AnnotatedImage {
        image: image.image.resize_bilinear(target, target)?,
        labels: image.labels.clone(),
        source_id: image.source_id.clone(),
    })
}

/// Disjoint train/validation partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub seed: u64,
    pub ratio: f64,
}

pub type DatasetSplit = Split<AnnotatedImage>;

/// Seeded shuffle, then the first `round(ratio·total)` items train.
pub fn split<T>(items: Vec<T>, ratio: f64, seed: u64) -> Result<Split<T>> {
    if items.is_empty() {
        return Err(Error::EmptyDataset("nothing to split".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let total = items.len();
    let n_train = (ratio * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = items.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index used once");
    let train = order[..n_train].iter().map(|&i| take(i)).collect();
    let val = order[n_train..].iter().map(|&i| take(i)).collect();
    Ok(Split {
        train,
        val,
        seed,
        ratio,
    })
}

impl DatasetSplit {
    /// `train <file>` / `val <file>` lines.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (tag, set) in [("train", &self.train), ("val", &self.val)] {
            for item in set {
                let _ = writeln!(out, "{tag} {}", item.source_id);
            }
        }
        out
    }

    /// Rebuilds a split from a manifest and the images it names.
    pub fn from_manifest(text: &str, images: Vec<AnnotatedImage>) -> Result<Self> {
        let mut by_id: std::collections::HashMap<String, AnnotatedImage> = images
            .into_iter()
            .map(|i| (i.source_id.clone(), i))
            .collect();
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (tag, file) = line.split_once(' ').ok_or_else(|| {
                Error::invalid(format!("manifest line {}: expected `<set> <file>`", n + 1))
            })?;
            let item = by_id.remove(file.trim()).ok_or_else(|| {
                Error::invalid(format!(
                    "manifest line {}: unknown or repeated file `{file}`",
                    n + 1
                ))
            })?;
            match tag {
                "train" => train.push(item),
                "val" => val.push(item),
                other => {
                    return Err(Error::invalid(format!(
                        "manifest line {}: unknown set `{other}`",
                        n + 1
                    )))
                }
            }
        }
        let total = (train.len() + val.len()).max(1);
        let ratio = train.len() as f64 / total as f64;
        Ok(Split {
            train,
            val,
            seed: 0,
            ratio,
        })
    }
}

/// Packs images into an N×3×S×S tensor with pixels scaled to [0, 1],
/// stretching any image that is not already S×S.
pub fn images_to_tensor(images: &[&RgbImage], size: usize) -> Result<Tensor<f32>> {
    let plane = size * size;
    let mut data = vec![0.0f32; images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        let resized;
        let img = if img.width() == size && img.height() == size {
            *img
        } else {
            resized = img.resize_bilinear(size, size)?;
            &resized
        };
        let px = img.pixels();
        let base = b * 3 * plane;
        for i in 0..plane {
            for c in 0..3 {
                data[base + c * plane + i] = px[i * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(vec![images.len(), 3, size, size], data)
}

pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<Vec<BoxLabel>>,
    /// Positions of the batch members in the source slice.
    pub indices: Vec<usize>,
}

/// Iterator over seeded, shuffled batches; the final partial batch is kept.
pub struct Batches<'a> {
    items: &'a [AnnotatedImage],
    order: Vec<usize>,
    batch_size: usize,
    input_size: usize,
    pos: usize,
}

impl Batches<'_> {
    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl Iterator for Batches<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let imgs: Vec<&RgbImage> = indices.iter().map(|&i| &self.items[i].image).collect();
        let labels = indices
            .iter()
            .map(|&i| self.items[i].labels.clone())
            .collect();
        Some(
            images_to_tensor(&imgs, self.input_size).map(|images| Batch {
                images,
                labels,
                indices,
            }),
        )
    }
}

pub fn make_batches(
    items: &[AnnotatedImage],
    batch_size: usize,
    epoch_seed: u64,
    input_size: usize,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(Batches {
        items,
        order,
        batch_size,
        input_size,
        pos: 0,
    })
}

/// Sequential (unshuffled) batches, for evaluation.
pub fn sequential_batches(
    items: &[AnnotatedImage],
    batch_size: usize,
    input_size: usize,
) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(Batches {
        items,
        order: (0..items.len()).collect(),
        batch_size,
        input_size,
        pos: 0,
    })
}
