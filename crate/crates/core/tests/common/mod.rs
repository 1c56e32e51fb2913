#![allow(dead_code)]

use firedet::tensor::{ops, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = random_tensor(rng, shape, 0.05, 1.5);
    for v in t.data_mut() {
        if rng.gen_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Largest violation of `|a − n| ≤ max(rtol·max(|a|, |n|), floor)`, as a
/// ratio to the allowed error (≤ 1 passes).
pub fn violation(analytic: f64, numeric: f64, rtol: f64) -> f64 {
    let allowed = (rtol * analytic.abs().max(numeric.abs())).max(ABS_FLOOR);
    (analytic - numeric).abs() / allowed
}

pub struct GradReport {
    pub checked: usize,
    pub failed: Vec<String>,
    pub worst: f64,
    pub detail: String,
}

impl GradReport {
    pub fn ok(&self) -> bool {
        self.worst <= 1.0
    }
}

/// Checks the analytic gradient of `f` (reduced to a scalar by a fixed
/// random projection) against central differences for every element of
/// every input.
pub fn check_op<F>(inputs: &[Tensor<f64>], rtol: f64, seed: u64, f: F) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let projection = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars);
        let shape = tape.value(out).shape().to_vec();
        random_tensor(&mut rng(seed), &shape, -1.0, 1.0)
    };
    let eval = |values: &[Tensor<f64>], grads: bool| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
            .collect();
        let out = f(&mut tape, &vars);
        let w = tape.constant(projection.clone());
        let prod = ops::mul(&mut tape, out, w).unwrap();
        let loss = ops::sum(&mut tape, prod);
        let value = tape.value(loss).data()[0];
        if !grads {
            return (value, Vec::new());
        }
        tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs, true);
    let mut report = GradReport {
        checked: 0,
        failed: Vec::new(),
        worst: 0.0,
        detail: String::new(),
    };
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * STEP);
            let v = violation(analytic[i][j], numeric, rtol);
            report.checked += 1;
            if v > 1.0 {
                report.failed.push(format!(
                    "input {i} element {j}: analytic {} numeric {numeric}",
                    analytic[i][j]
                ));
            }
            if v > report.worst {
                report.worst = v;
                report.detail = format!(
                    "input {i} element {j}: analytic {} numeric {numeric}",
                    analytic[i][j]
                );
            }
        }
    }
    report
}

pub fn op_cases() -> Vec<(&'static str, GradReport)> {
    use firedet::tensor::ops::NormStats;
    use firedet::training::{bce_with_logits, box_iou_loss, BoxTarget, Reduction};
    use std::sync::Arc;

    let mut r = rng(11);
    let rt = 1e-4;
    let mut out = Vec::new();
    let a = random_tensor(&mut r, &[2, 3, 4], -2.0, 2.0);
    let b = random_tensor(&mut r, &[2, 3, 4], -2.0, 2.0);
    out.push((
        "add",
        check_op(&[a.clone(), b.clone()], rt, 1, |t, v| {
            ops::add(t, v[0], v[1]).unwrap()
        }),
    ));
    out.push((
        "mul",
        check_op(&[a.clone(), b.clone()], rt, 2, |t, v| {
            ops::mul(t, v[0], v[1]).unwrap()
        }),
    ));
    out.push((
        "scale",
        check_op(&[a.clone()], rt, 3, |t, v| ops::scale(t, v[0], -1.7)),
    ));
    out.push((
        "sum",
        check_op(&[a.clone()], rt, 4, |t, v| ops::sum(t, v[0])),
    ));
    out.push((
        "mean",
        check_op(&[a.clone()], rt, 5, |t, v| ops::mean(t, v[0])),
    ));
    let x = away_from_zero(&mut r, &[2, 3, 5]);
    out.push((
        "leaky_relu",
        check_op(&[x], rt, 6, |t, v| ops::leaky_relu(t, v[0], 0.1).unwrap()),
    ));
    let x = random_tensor(&mut r, &[3, 7], -6.0, 6.0);
    out.push((
        "sigmoid",
        check_op(&[x], rt, 7, |t, v| ops::sigmoid(t, v[0])),
    ));

    let input = random_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
    let weight = random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
    let bias = random_tensor(&mut r, &[4], -0.5, 0.5);
    out.push((
        "conv2d",
        check_op(&[input.clone(), weight.clone(), bias], rt, 8, |t, v| {
            ops::conv2d(t, v[0], v[1], Some(v[2]), 2, 1).unwrap()
        }),
    ));
    let w1 = random_tensor(&mut r, &[5, 3, 1, 1], -0.5, 0.5);
    out.push((
        "conv2d_1x1",
        check_op(&[input.clone(), w1], rt, 9, |t, v| {
            ops::conv2d(t, v[0], v[1], None, 1, 0).unwrap()
        }),
    ));

    let gamma = random_tensor(&mut r, &[3], 0.5, 1.5);
    let beta = random_tensor(&mut r, &[3], -0.5, 0.5);
    out.push((
        "batch_norm2d",
        check_op(
            &[input.clone(), gamma.clone(), beta.clone()],
            rt,
            10,
            |t, v| {
                ops::batch_norm2d(t, v[0], v[1], v[2], 1e-3, NormStats::Batch)
                    .unwrap()
                    .0
            },
        ),
    ));
    let (rm, rv) = (vec![0.1, -0.2, 0.3], vec![0.5, 1.2, 2.0]);
    out.push((
        "batch_norm2d_running",
        check_op(&[input.clone(), gamma, beta], rt, 11, |t, v| {
            ops::batch_norm2d(
                t,
                v[0],
                v[1],
                v[2],
                1e-3,
                NormStats::Running {
                    mean: &rm,
                    var: &rv,
                },
            )
            .unwrap()
            .0
        }),
    ));

    let c2 = random_tensor(&mut r, &[2, 2, 6, 6], -1.0, 1.0);
    out.push((
        "concat_channels",
        check_op(&[input.clone(), c2], rt, 12, |t, v| {
            ops::concat_channels(t, &[v[0], v[1]]).unwrap()
        }),
    ));
    out.push((
        "split_channels",
        check_op(&[input.clone()], rt, 13, |t, v| {
            let parts = ops::split_channels(t, v[0], &[1, 2]).unwrap();
            let y = ops::scale(t, parts[0], 3.0);
            let s0 = ops::sum(t, y);
            let s1 = ops::sum(t, parts[1]);
            let pair = ops::concat_flat(t, &[s0, s1]).unwrap();
            pair
        }),
    ));
    out.push((
        "upsample_nearest2x",
        check_op(&[input.clone()], rt, 14, |t, v| {
            ops::upsample_nearest2x(t, v[0]).unwrap()
        }),
    ));
    out.push((
        "space_to_depth",
        check_op(&[input.clone()], rt, 15, |t, v| {
            ops::space_to_depth(t, v[0]).unwrap()
        }),
    ));
    let idx = Arc::new(vec![0usize, 5, 5, 17, 71, 3]);
    out.push((
        "gather",
        check_op(&[input.clone()], rt, 16, |t, v| {
            ops::gather(t, v[0], idx.clone()).unwrap()
        }),
    ));
    let f2 = random_tensor(&mut r, &[7], -1.0, 1.0);
    out.push((
        "concat_flat",
        check_op(&[a.clone(), f2], rt, 17, |t, v| {
            ops::concat_flat(t, &[v[0], v[1]]).unwrap()
        }),
    ));

    let logits = random_tensor(&mut r, &[12], -4.0, 4.0);
    let targets: Vec<f64> = (0..12).map(|i| [0.0, 1.0, 0.3][i % 3]).collect();
    for (name, red) in [
        ("bce_none", Reduction::None),
        ("bce_mean", Reduction::Mean),
        ("bce_sum", Reduction::Sum),
    ] {
        let y = targets.clone();
        out.push((
            name,
            check_op(&[logits.clone()], rt, 18, move |t, v| {
                bce_with_logits(t, v[0], &y, 1.3, 2.0, red).unwrap()
            }),
        ));
    }

    let targets = Arc::new(vec![
        BoxTarget {
            grid_x: 3,
            grid_y: 4,
            anchor: [20.0, 30.0],
            stride: 8.0,
            gt: [30.0, 38.0, 24.0, 26.0],
        },
        BoxTarget {
            grid_x: 1,
            grid_y: 0,
            anchor: [50.0, 40.0],
            stride: 16.0,
            gt: [20.0, 12.0, 60.0, 30.0],
        },
    ]);
    let raw = Tensor::new(vec![8], vec![0.1, -0.2, 0.3, 0.05, 0.2, 0.1, -0.3, 0.4]).unwrap();
    out.push((
        "box_iou_loss",
        check_op(&[raw], rt, 19, |t, v| {
            box_iou_loss(t, v[0], targets.clone()).unwrap()
        }),
    ));
    out
}

/// Full compound loss on a 2-image synthetic batch through a width-0.25
/// preset-n model: sampled parameters (the largest-gradient element and two
/// random ones per tensor) against central differences of step `step`.
pub fn full_loss_check(step: f64, rtol: f64) -> GradReport {
    use firedet::dataset::{generate_synthetic, images_to_tensor};
    use firedet::detector::{build_model, Mode, ModelConfig, Preset};
    use firedet::training::{batch_loss, LossConfig};

    let size = 64;
    let cfg = ModelConfig::from_preset(Preset::N, 1, size);
    let mut model = build_model::<f64>(&cfg, 3).unwrap();
    let data = generate_synthetic(2, size, 21).unwrap();
    let imgs: Vec<_> = data.iter().map(|d| &d.image).collect();
    let batch = images_to_tensor(&imgs, size).unwrap().cast::<f64>();
    let labels: Vec<_> = data.iter().map(|d| d.labels.clone()).collect();
    let loss = LossConfig::default();

    let value = |m: &firedet::detector::DetectorModel<f64>| {
        let mut tape = Tape::new();
        let (b, _) = batch_loss(m, &mut tape, batch.clone(), &labels, &loss, Mode::Train).unwrap();
        tape.value(b.total).data()[0]
    };
    let mut tape = Tape::new();
    let (b, fwd) = batch_loss(
        &model,
        &mut tape,
        batch.clone(),
        &labels,
        &loss,
        Mode::Train,
    )
    .unwrap();
    tape.backward(b.total).unwrap();
    let grads: Vec<(String, Vec<f64>)> = fwd
        .params
        .iter()
        .map(|(n, &v)| {
            (
                n.clone(),
                tape.grad(v)
                    .expect("every parameter gets a gradient")
                    .to_vec(),
            )
        })
        .collect();
    drop(tape);

    let mut r = rng(5);
    let mut report = GradReport {
        checked: 0,
        failed: Vec::new(),
        worst: 0.0,
        detail: String::new(),
    };
    for (name, g) in &grads {
        let top = (0..g.len())
            .max_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs()))
            .unwrap();
        for j in [top, r.gen_range(0..g.len()), r.gen_range(0..g.len())] {
            let orig = model.store().params()[name.as_str()].data()[j];
            model.store_mut().params_mut()[name.as_str()].data_mut()[j] = orig + step;
            let up = value(&model);
            model.store_mut().params_mut()[name.as_str()].data_mut()[j] = orig - step;
            let down = value(&model);
            model.store_mut().params_mut()[name.as_str()].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let v = violation(g[j], numeric, rtol);
            report.checked += 1;
            if v > 1.0 {
                report.failed.push(format!(
                    "{name}[{j}]: analytic {} numeric {numeric} ({v:.1}×)",
                    g[j]
                ));
            }
            if v > report.worst {
                report.worst = v;
                report.detail = format!("{name}[{j}]: analytic {} numeric {numeric}", g[j]);
            }
        }
    }
    report
}
