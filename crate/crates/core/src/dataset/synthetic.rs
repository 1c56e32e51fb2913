use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AnnotatedImage, BoxLabel, RgbImage};
use crate::error::{Error, Result};

/// Blob diameter range as a fraction of image width.
pub const BLOB_SIZE_RANGE: (f64, f64) = (0.05, 0.40);

fn image_rng(seed: u64, index: usize, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index as u64);
    rng
}

/// Dark, low-contrast texture: a coarse random lattice, bilinearly smoothed,
/// plus per-pixel grain.
fn background(size: usize, rng: &mut ChaCha8Rng) -> RgbImage {
    const CELLS: usize = 6;
    let tint = [
        rng.gen_range(20.0..55.0),
        rng.gen_range(18.0..45.0),
        rng.gen_range(15.0..50.0),
    ];
    let lattice: Vec<f64> = (0..(CELLS + 1) * (CELLS + 1))
        .map(|_| rng.gen_range(-15.0..15.0))
        .collect();
    let mut img = RgbImage::filled(size, size, [0, 0, 0]).expect("size checked by caller");
    let step = (size - 1).max(1) as f64 / CELLS as f64;
    for y in 0..size {
        let gy = y as f64 / step;
        let (y0, fy) = (
            (gy.floor() as usize).min(CELLS - 1),
            gy - gy.floor().min((CELLS - 1) as f64),
        );
        for x in 0..size {
            let gx = x as f64 / step;
            let (x0, fx) = (
                (gx.floor() as usize).min(CELLS - 1),
                gx - gx.floor().min((CELLS - 1) as f64),
            );
            let at = |cx: usize, cy: usize| lattice[cy * (CELLS + 1) + cx];
            let smooth = (at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx) * (1.0 - fy)
                + (at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx) * fy;
            let grain: f64 = rng.gen_range(-8.0..8.0);
            let px = tint.map(|t| (t + smooth + grain).round().clamp(0.0, 255.0) as u8);
            img.put(x, y, px);
        }
    }
    img
}

struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    /// Edge radius at angle `theta`; harmonic amplitudes keep it within
    /// roughly ±20% of the nominal radius.
    fn edge(&self, theta: f64) -> f64 {
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(k, &(amp, phase))| amp * ((k as f64 + 2.0) * theta + phase).sin())
            .sum();
        self.radius * (1.0 + wobble)
    }

    fn outer(&self) -> f64 {
        self.radius * 1.2
    }
}

fn disjoint(a: &Blob, b: &Blob) -> bool {
    let gap = a.outer() + b.outer() + 2.0;
    (a.cx - b.cx).abs() > gap || (a.cy - b.cy).abs() > gap
}

fn paint(
    img: &mut RgbImage,
    blob: &Blob,
    rng: &mut ChaCha8Rng,
) -> Option<(usize, usize, usize, usize)> {
    let size = img.width();
    let reach = blob.outer().ceil() as isize + 1;
    let (cx, cy) = (blob.cx, blob.cy);
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    let lo = |c: f64| (c.floor() as isize - reach).max(0) as usize;
    let hi = |c: f64| ((c.floor() as isize + reach) as usize).min(size - 1);
    for y in lo(cy)..=hi(cy) {
        for x in lo(cx)..=hi(cx) {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let dist = dx.hypot(dy);
            let edge = blob.edge(dy.atan2(dx));
            let jitter: f64 = rng.gen_range(-0.6..0.6);
            if dist > edge + jitter {
                continue;
            }
            let t = (dist / edge).clamp(0.0, 1.0);
            // white-yellow core fading to deep red at the rim
            let core = [255.0, 235.0, 140.0];
            let mid = [250.0, 140.0, 30.0];
            let rim = [205.0, 45.0, 15.0];
            let mix =
                |a: [f64; 3], b: [f64; 3], u: f64| [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * u);
            let base = if t < 0.5 {
                mix(core, mid, t * 2.0)
            } else {
                mix(mid, rim, (t - 0.5) * 2.0)
            };
            let n: f64 = rng.gen_range(-10.0..10.0);
            img.put(x, y, base.map(|v| (v + n).round().clamp(0.0, 255.0) as u8));
            bounds = Some(match bounds {
                None => (x, y, x, y),
                Some((x1, y1, x2, y2)) => (x1.min(x), y1.min(y), x2.max(x), y2.max(y)),
            });
        }
    }
    bounds
}

/// Deterministic fire-like dataset: dark textured backgrounds with one to
/// three non-overlapping orange-red blobs, each labelled (class 0) by the
/// bounding box of its painted pixels.
pub fn generate_synthetic(
    count: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<AnnotatedImage>> {
    check_args(count, image_size)?;
    (0..count)
        .map(|i| {
            let mut rng = image_rng(seed, i, 0x5eed_f12e);
            let mut image = background(image_size, &mut rng);
            let s = image_size as f64;
            let wanted = rng.gen_range(1..=3);
            let mut blobs: Vec<Blob> = Vec::new();
            for _ in 0..40 {
                if blobs.len() == wanted {
                    break;
                }
                let diameter = rng.gen_range(BLOB_SIZE_RANGE.0..=BLOB_SIZE_RANGE.1) * s;
                let radius = diameter / 2.0;
                let margin = radius * 1.2 + 1.0;
                let blob = Blob {
                    cx: rng.gen_range(margin..=s - margin),
                    cy: rng.gen_range(margin..=s - margin),
                    radius,
                    harmonics: [(); 3].map(|_| {
                        (
                            rng.gen_range(0.0..0.07),
                            rng.gen_range(0.0..std::f64::consts::TAU),
                        )
                    }),
                };
                if blobs.iter().all(|b| disjoint(b, &blob)) {
                    blobs.push(blob);
                }
            }
            let mut labels = Vec::new();
            for blob in &blobs {
                if let Some((x1, y1, x2, y2)) = paint(&mut image, blob, &mut rng) {
                    let (x1, y1) = (x1 as f64 / s, y1 as f64 / s);
                    let (x2, y2) = ((x2 + 1) as f64 / s, (y2 + 1) as f64 / s);
                    labels.push(BoxLabel::new(
                        0,
                        (x1 + x2) / 2.0,
                        (y1 + y2) / 2.0,
                        x2 - x1,
                        y2 - y1,
                    )?);
                }
            }
            Ok(AnnotatedImage {
                image,
                labels,
                source_id: format!("synth_{i:05}.ppm"),
            })
        })
        .collect()
}

/// Backgrounds from the same distribution with no blobs, for negative checks.
pub fn generate_background(count: usize, image_size: usize, seed: u64) -> Result<Vec<RgbImage>> {
    check_args(count, image_size)?;
    Ok((0..count)
        .map(|i| background(image_size, &mut image_rng(seed, i, 0xb4c6_0000)))
        .collect())
}

fn check_args(count: usize, image_size: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::invalid("synthetic count must be at least 1"));
    }
    if image_size < 32 {
        return Err(Error::invalid(format!(
            "synthetic image size must be at least 32, got {image_size}"
        )));
    }
    Ok(())
}
