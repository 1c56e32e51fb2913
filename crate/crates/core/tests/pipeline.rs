use firedet::dataset::{
    dataset_dirs, generate_synthetic, images_to_tensor, load_dataset, split, write_dataset,
};
use firedet::detector::{build_model, DetectorModel, Mode, ModelConfig, Preset};
use firedet::error::Error;
use firedet::inference::{detect_image, evaluate_model, InferenceConfig};
use firedet::tensor::{ops, Tape};
use firedet::training::{
    batch_loss, sgd_step, train, EpochRecord, LossConfig, OptimizerConfig, TrainSettings,
};

fn settings(epochs: usize, batch: usize, lr: f64) -> TrainSettings {
    TrainSettings {
        optimizer: OptimizerConfig {
            learning_rate: lr,
            epochs,
            batch_size: batch,
            final_lr_fraction: None,
        },
        loss: LossConfig::default(),
        seed: 9,
        validation: InferenceConfig::validation(),
        out_dir: None,
    }
}

fn tiny(size: usize) -> DetectorModel<f32> {
    build_model(&ModelConfig::from_preset(Preset::N, 1, size), 2).unwrap()
}

#[test]
fn overfits_a_single_image() {
    let item = generate_synthetic(1, 64, 3).unwrap().remove(0);
    let mut model = tiny(64);
    let batch = images_to_tensor(&[&item.image], 64).unwrap();
    let labels = vec![item.labels.clone()];
    let loss = LossConfig::default();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let x = tape.constant(batch.clone());
        let out = model.forward_train(&mut tape, x).unwrap();
        let assignment = firedet::training::assign_targets(&labels, model.config(), &loss).unwrap();
        let lb = firedet::training::compute_loss(
            &mut tape,
            &out.maps,
            &assignment,
            model.config(),
            &loss,
        )
        .unwrap();
        losses.push(tape.value(lb.total).data()[0]);
        tape.backward(lb.total).unwrap();
        model.collect_grads(&tape, &out.params).unwrap();
        sgd_step(model.store_mut().params_mut(), 0.01).unwrap();
    }
    assert!(losses[199] < losses[0], "{} -> {}", losses[0], losses[199]);
}

fn strip_time(h: &[EpochRecord]) -> Vec<EpochRecord> {
    h.iter()
        .map(|r| EpochRecord {
            epoch_seconds: 0.0,
            ..r.clone()
        })
        .collect()
}

#[test]
fn same_seed_same_history_and_weights() {
    let data = generate_synthetic(12, 64, 4).unwrap();
    let s = split(data, 0.5, 1).unwrap();
    let run = || {
        let mut m = tiny(64);
        let h = train(&mut m, &s.train, &s.val, &settings(2, 4, 0.001), |_| {}).unwrap();
        (h, m)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(strip_time(&h1.epochs), strip_time(&h2.epochs));
    assert_eq!(h1.best_epoch, h2.best_epoch);
    for ((n1, t1), (_, t2)) in m1.store().params().iter().zip(m2.store().params()) {
        let same = t1
            .data()
            .iter()
            .zip(t2.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "{n1} differs");
    }
}

#[test]
fn divergence_names_epoch_and_batch() {
    let data = generate_synthetic(8, 64, 5).unwrap();
    let s = split(data, 0.5, 1).unwrap();
    let mut m = tiny(64);
    let err = train(&mut m, &s.train, &s.val, &settings(3, 2, 1e30), |_| {}).unwrap_err();
    match err {
        Error::Divergence { epoch, batch } => {
            assert!(epoch >= 1 && batch >= 1);
            let msg = err.to_string();
            assert!(
                msg.contains(&format!("epoch {epoch}")) && msg.contains(&format!("batch {batch}"))
            );
        }
        other => panic!("expected divergence, got {other}"),
    }
}

#[test]
fn train_rejects_bad_inputs() {
    let data = generate_synthetic(4, 64, 6).unwrap();
    let mut m = tiny(64);
    assert!(matches!(
        train(&mut m, &[], &data, &settings(1, 1, 0.001), |_| {}),
        Err(Error::EmptyDataset(_))
    ));
    assert!(matches!(
        train(&mut m, &data, &[], &settings(1, 1, 0.001), |_| {}),
        Err(Error::EmptyDataset(_))
    ));
    assert!(matches!(
        train(&mut m, &data, &data, &settings(1, 5, 0.001), |_| {}),
        Err(Error::Config { .. })
    ));
}

#[test]
fn checkpoints_and_history_written() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(6, 64, 7).unwrap();
    let s = split(data, 0.5, 2).unwrap();
    let mut m = tiny(64);
    let mut cfg = settings(2, 3, 0.001);
    cfg.out_dir = Some(dir.path().to_path_buf());
    let h = train(&mut m, &s.train, &s.val, &cfg, |_| {}).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv, h.to_csv());
    let last = DetectorModel::<f32>::load(&dir.path().join("last.ckpt")).unwrap();
    assert_eq!(last.store().params(), m.store().params());
    let best = DetectorModel::<f32>::load(&dir.path().join("best.ckpt")).unwrap();
    let report = evaluate_model(&best, &s.val, 3, &cfg.validation, "best").unwrap();
    let b = h.best().unwrap();
    assert_eq!(report.map, b.val_map50);
}

#[test]
fn every_parameter_receives_gradient() {
    let model = build_model::<f64>(&ModelConfig::from_preset(Preset::N, 2, 64), 8).unwrap();
    let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    let data: Vec<f64> = (0..2 * 3 * 64 * 64)
        .map(|_| rand::Rng::gen_range(&mut r, 0.0..1.0))
        .collect();
    let mut tape = Tape::new();
    let x = tape.constant(firedet::tensor::Tensor::new(vec![2, 3, 64, 64], data).unwrap());
    let out = model.forward(&mut tape, x, Mode::Train).unwrap();
    let sums: Vec<_> = out.maps.iter().map(|&m| ops::sum(&mut tape, m)).collect();
    let flat = ops::concat_flat(&mut tape, &sums).unwrap();
    let total = ops::sum(&mut tape, flat);
    tape.backward(total).unwrap();
    for (name, &v) in &out.params {
        let g = tape
            .grad(v)
            .unwrap_or_else(|| panic!("{name} has no gradient"));
        assert!(
            g.iter().any(|&v| v != 0.0),
            "{name} gradient is identically zero"
        );
    }
}

#[test]
fn zero_box_weight_ignores_box_offsets() {
    let data = generate_synthetic(2, 64, 8).unwrap();
    let model = build_model::<f64>(&ModelConfig::from_preset(Preset::N, 1, 64), 1).unwrap();
    let imgs: Vec<_> = data.iter().map(|d| &d.image).collect();
    let batch = images_to_tensor(&imgs, 64).unwrap().cast::<f64>();
    let labels: Vec<_> = data.iter().map(|d| d.labels.clone()).collect();
    let loss = LossConfig {
        lambda_box: 0.0,
        ..LossConfig::default()
    };
    let mut tape = Tape::new();
    let (lb, out) = batch_loss(&model, &mut tape, batch, &labels, &loss, Mode::Train).unwrap();
    tape.backward(lb.total).unwrap();
    let per = 6;
    for &map in &out.maps {
        let g = tape.grad(map).unwrap();
        let (_, ch, h, w) = tape.value(map).dims4().unwrap();
        for c in 0..ch {
            if c % per < 4 {
                let plane = &g[c * h * w..(c + 1) * h * w];
                assert!(plane.iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn dataset_roundtrip_and_detection_in_source_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let items = generate_synthetic(3, 80, 9).unwrap();
    write_dataset(&items, dir.path()).unwrap();
    let (img, lbl) = dataset_dirs(dir.path());
    let report = load_dataset(&img, &lbl).unwrap();
    assert!(report.rejections.is_empty());
    assert_eq!(report.images.len(), 3);
    for (a, b) in report.images.iter().zip(&items) {
        assert_eq!(a.image, b.image);
        for (x, y) in a.labels.iter().zip(&b.labels) {
            assert!((x.cx - y.cx).abs() < 1e-6 && (x.w - y.w).abs() < 1e-6);
        }
    }
    let model = tiny(64);
    let cfg = InferenceConfig {
        conf_threshold: 0.01,
        ..InferenceConfig::default()
    };
    let (dets, latency) = detect_image(&model, &items[0].image, &cfg).unwrap();
    assert!(latency >= 0.0);
    for d in dets {
        assert!(d.bbox.x1 >= 0.0 && d.bbox.x2 <= 80.0 && d.bbox.y1 >= 0.0 && d.bbox.y2 <= 80.0);
        assert!(d.bbox.x2 > d.bbox.x1 && d.bbox.y2 > d.bbox.y1);
    }
}
