use mstcn::checkpoint::{load_checkpoint, save_checkpoint};
use mstcn::data::{synthesize_dataset, LabeledSeries, MultichannelSeries, SynthSpec};
use mstcn::train::{predict, train, training_slices, write_metrics_log, TrainConfig, Trainer};
use mstcn::{build_model, ModelConfig, Tensor};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            num_stages: 2,
            layers_per_stage: 5,
            num_filters: 8,
            in_channels: 6,
            num_classes: 5,
            ..Default::default()
        },
        epochs,
        lr: 5e-3,
        slice_seconds: 4.0,
        batch_size: 4,
        seed: 17,
        ..Default::default()
    }
}

fn dataset() -> Vec<LabeledSeries> {
    synthesize_dataset(&SynthSpec::volleyball(2, 24.0, 0.08, 5)).unwrap()
}

#[test]
fn loss_decreases_by_epoch_ten() {
    let data = dataset();
    let refs: Vec<&LabeledSeries> = data.iter().collect();
    let out = train(&config(10), &refs).unwrap();
    assert_eq!(out.log.len(), 10);
    assert!(out.log[9].total < out.log[0].total, "{} vs {}", out.log[9].total, out.log[0].total);
    assert!(out.log.windows(2).all(|w| w[1].step > w[0].step));
}

#[test]
fn identical_seeds_give_identical_logs() {
    let data = dataset();
    let refs: Vec<&LabeledSeries> = data.iter().collect();
    let logs: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let out = train(&config(3), &refs).unwrap();
            let mut buf = Vec::new();
            write_metrics_log(&out.log, &mut buf).unwrap();
            buf
        })
        .collect();
    assert_eq!(logs[0], logs[1]);
    let first: serde_json::Value = serde_json::from_slice(logs[0].split(|&b| b == b'\n').next().unwrap()).unwrap();
    let keys: Vec<&str> = first.as_object().unwrap().keys().map(String::as_str).collect();
    assert_eq!(keys, ["epoch", "per_stage", "step", "total"]);

    let mut other = config(3);
    other.seed = 18;
    let out = train(&other, &refs).unwrap();
    let mut buf = Vec::new();
    write_metrics_log(&out.log, &mut buf).unwrap();
    assert_ne!(buf, logs[0]);
}

#[test]
fn checkpoint_predictions_agree_to_f32_precision() {
    let data = dataset();
    let refs: Vec<&LabeledSeries> = data.iter().collect();
    let out = train(&config(2), &refs).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.net, 17, 2, &path).unwrap();
    let (loaded, manifest) = load_checkpoint(&path).unwrap();
    assert_eq!(manifest.epoch, 2);

    // A training slice, and the full sequence.
    let slices = training_slices(&config(2), &refs).unwrap();
    let a = out.net.predict(&slices[0].inputs).unwrap();
    let b = loaded.predict(&slices[0].inputs).unwrap();
    assert!(a.max_abs_diff(&b) <= 1e-5, "{}", a.max_abs_diff(&b));
    let full_a = predict(&out.net, &data[0].series).unwrap();
    let full_b = predict(&loaded, &data[0].series).unwrap();
    for (x, y) in full_a.iter().zip(&full_b) {
        assert!(x.probs.max_abs_diff(&y.probs) <= 1e-5);
    }
}

#[test]
fn long_sequence_processed_whole() {
    let net = build_model(&config(1).model, 3).unwrap();
    let t = 100_000;
    let samples = Tensor::new(vec![t, 6], (0..t * 6).map(|i| ((i % 97) as f64 - 48.0) / 50.0).collect()).unwrap();
    let series = MultichannelSeries {
        sample_rate_hz: 100.0,
        channel_names: (0..6).map(|i| format!("c{i}")).collect(),
        samples,
        subject_id: "s".into(),
        session_id: "x".into(),
    };
    let outs = predict(&net, &series).unwrap();
    assert_eq!(outs.len(), 2);
    assert!(outs.iter().all(|o| o.probs.rows() == t && o.probs.is_finite()));
}

#[test]
fn zero_input_gives_valid_probabilities() {
    let net = build_model(&config(1).model, 4).unwrap();
    let probs = net.predict(&Tensor::zeros(&[500, 6])).unwrap();
    assert!(probs.is_finite());
    for t in 0..probs.rows() {
        assert!((probs.row(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn divergence_keeps_last_completed_step() {
    let data = dataset();
    let refs: Vec<&LabeledSeries> = data.iter().collect();
    let mut slices = training_slices(&config(1), &refs).unwrap();
    let mut trainer = Trainer::new(config(3)).unwrap();
    trainer.run_epoch(&slices).unwrap();
    let good = trainer.net().flat_values();
    slices[0].inputs.data_mut()[0] = f64::NAN;
    let err = trainer.run_epoch(&slices).unwrap_err();
    assert!(matches!(err, mstcn::Error::Diverged { epoch: 2, .. }), "{err}");
    assert_eq!(trainer.net().flat_values().len(), good.len());
    assert!(trainer.net().flat_values().iter().all(|v| v.is_finite()));
    assert_eq!(trainer.log().len(), 1);
}
