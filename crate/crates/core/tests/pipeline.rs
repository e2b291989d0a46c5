use std::path::Path;

use realgin::bench::{bench, bench_inputs, LatencyStats};
use realgin::checkpoint::{Checkpoint, TrainState};
use realgin::data::{load_batch, split_records};
use realgin::eval::{evaluate, score};
use realgin::optim::Adam;
use realgin::train::{
    train_on, train_step, TrainOptions, BEST_CHECKPOINT, LAST_CHECKPOINT, METRICS_FILE, STEPS_FILE,
};
use realgin::visualize::visualize;
use realgin::{Model, ModelConfig, RginError, RunConfig};
use rgin_synth::{
    decode_png, read_dataset, write_dataset, Dataset, SceneConfig, Split, TemplateClass,
    TemplateMix,
};

fn toy_dataset(dir: &Path, count: usize) -> Dataset {
    let cfg = SceneConfig {
        canvas: 32,
        ..SceneConfig::default()
    };
    write_dataset(dir, 11, count, &TemplateMix::default(), &cfg).unwrap();
    read_dataset(dir).unwrap()
}

fn toy_run(data: &Path, out: &Path, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = ModelConfig::toy();
    cfg.train.max_epochs = epochs;
    cfg.train.batch = 8;
    cfg.train.seed = 4;
    cfg.data.data_dir = data.to_path_buf();
    cfg.data.out_dir = out.to_path_buf();
    cfg
}

fn toy_model() -> Model {
    Model::new(ModelConfig::toy(), vec![(0.8, 1.2)], 2).unwrap()
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let ck = Checkpoint {
        config: toy_run(Path::new("d"), Path::new("o"), 3),
        model: toy_model(),
        adam: Adam::default(),
        state: TrainState {
            epoch: 3,
            best_epoch: 1,
            best_precision: 0.25,
            best_val_loss: 1.5,
            bad_epochs: 2,
        },
    };
    let bytes = ck.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    for (name, v) in ck.model.params.iter() {
        let w = back.model.params.get(name).unwrap();
        assert!(
            v.data()
                .iter()
                .zip(w.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name}"
        );
    }
    assert_eq!(back.state, ck.state);
    assert_eq!(back.model.priors, ck.model.priors);

    let fresh = Checkpoint {
        state: TrainState::default(),
        ..ck
    };
    let back = Checkpoint::from_bytes(&fresh.to_bytes()).unwrap();
    assert_eq!(back.state.best_val_loss, f64::INFINITY);
}

#[test]
fn checkpoint_loader_rejects_damage() {
    let ck = Checkpoint {
        config: toy_run(Path::new("d"), Path::new("o"), 1),
        model: toy_model(),
        adam: Adam::default(),
        state: TrainState::default(),
    };
    let bytes = ck.to_bytes();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());
    let mut bad_version = bytes.clone();
    bad_version[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(Checkpoint::from_bytes(&bad_version).is_err());
    for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            Checkpoint::from_bytes(&bytes[..cut]).is_err(),
            "cut at {cut}"
        );
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::from_bytes(&trailing).is_err());
    // overwrite one stored 1.0 (a batch-norm scale or variance) with NaN
    let nan_at = bytes
        .windows(4)
        .rposition(|w| w == 1.0f32.to_le_bytes())
        .unwrap();
    let mut poisoned = bytes.clone();
    poisoned[nan_at..nan_at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let err = Checkpoint::from_bytes(&poisoned).unwrap_err();
    assert!(err.to_string().contains("non-finite"), "{err}");
    let garbage: Vec<u8> = (0..4096u32)
        .map(|i| (i.wrapping_mul(2654435761) >> 13) as u8)
        .collect();
    assert!(Checkpoint::from_bytes(&garbage).is_err());

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("x.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().to_bytes(), bytes);
    assert!(Checkpoint::load(&tmp.path().join("missing.ckpt")).is_err());
}

#[test]
fn zero_lambda_reports_but_ignores_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path(), 20);
    let mut cfg = ModelConfig::toy();
    cfg.lambda = 0.0;
    let mut model = Model::new(cfg.clone(), vec![(1.0, 1.0)], 1).unwrap();
    let records = split_records(&ds, Split::Train);
    let batch = load_batch(&ds, &records[..4], &model.vocab, cfg.max_tokens, 1).unwrap();
    let targets = batch.targets(&model.priors, cfg.grid()).unwrap();
    let l = train_step(&mut model, &mut Adam::default(), &batch, &targets, 1e-3)
        .unwrap()
        .unwrap();
    assert!(l.att.unwrap() > 0.0);
    assert_eq!(l.total, l.det);
}

#[test]
fn training_writes_logs_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let ds = toy_dataset(&data, 40);
    let opts = TrainOptions {
        log_steps: true,
        ..TrainOptions::default()
    };
    let summary = train_on(&toy_run(&data, &out, 2), &ds, &opts).unwrap();
    assert_eq!(summary.epochs_completed, 2);
    assert!(out.join(BEST_CHECKPOINT).exists());
    assert!(out.join(LAST_CHECKPOINT).exists());
    let metrics = lines(&out.join(METRICS_FILE));
    assert_eq!(metrics.len(), 2);
    let first: serde_json::Value = serde_json::from_str(&metrics[0]).unwrap();
    for key in [
        "epoch",
        "lr",
        "train_loss",
        "train_det_loss",
        "train_att_loss",
        "val_loss",
        "val_precision",
        "best",
    ] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert_eq!(first["best"], serde_json::Value::Bool(true));

    let resume = TrainOptions {
        resume: true,
        log_steps: true,
        ..TrainOptions::default()
    };
    let summary = train_on(&toy_run(&data, &out, 3), &ds, &resume).unwrap();
    assert_eq!(summary.epochs_completed, 3);
    assert_eq!(summary.history.len(), 1);
    let epochs: Vec<u64> = lines(&out.join(METRICS_FILE))
        .iter()
        .map(|l| {
            serde_json::from_str::<serde_json::Value>(l).unwrap()["epoch"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(epochs, vec![0, 1, 2]);
    assert_eq!(
        Checkpoint::load(&out.join(LAST_CHECKPOINT))
            .unwrap()
            .state
            .epoch,
        3
    );

    // resuming under a different model shape is refused
    let mut other = toy_run(&data, &out, 4);
    other.model.heads = 1;
    assert!(train_on(&other, &ds, &resume).is_err());
}

#[test]
fn same_seed_gives_identical_step_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let ds = toy_dataset(&data, 30);
    let opts = TrainOptions {
        log_steps: true,
        ..TrainOptions::default()
    };
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        train_on(&toy_run(&data, &out, 2), &ds, &opts).unwrap();
        logs.push(std::fs::read(out.join(STEPS_FILE)).unwrap());
    }
    assert!(!logs[0].is_empty());
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = tmp.path().join("out");
    let ds = toy_dataset(&data, 40);
    let steps_per_epoch = split_records(&ds, Split::Train).len() / 8;
    let opts = TrainOptions {
        poison_step: Some(steps_per_epoch as u64 + 1),
        ..TrainOptions::default()
    };
    let err = train_on(&toy_run(&data, &out, 5), &ds, &opts).unwrap_err();
    assert!(
        matches!(err, RginError::NonFiniteLoss { epoch: 1, .. }),
        "{err}"
    );
    assert_eq!(
        Checkpoint::load(&out.join(LAST_CHECKPOINT))
            .unwrap()
            .state
            .epoch,
        1
    );
}

#[test]
fn scoring_uses_a_strict_half_iou_threshold() {
    let gts = [
        [0.1, 0.1, 0.4, 0.4],
        [0.5, 0.5, 0.3, 0.2],
        [0.0, 0.0, 0.5, 0.5],
    ];
    let classes = [
        TemplateClass::Category,
        TemplateClass::Attribute,
        TemplateClass::Relational,
    ];
    let r = score(&gts, &gts, &classes);
    assert_eq!(r.precision(), 1.0);
    assert_eq!(r.template(TemplateClass::Attribute).total, 1);
    assert_eq!(r.template(TemplateClass::Location).total, 0);

    let wrong = [
        [0.6, 0.6, 0.1, 0.1],
        [0.0, 0.0, 0.1, 0.1],
        [0.7, 0.7, 0.2, 0.2],
    ];
    assert_eq!(score(&wrong, &gts, &classes).precision(), 0.0);

    // IoU exactly 1/2 is a miss, slightly more is a hit
    let half = [[0.0, 0.0, 0.5, 0.5]];
    let g = [[0.0, 0.0, 0.5, 0.25]];
    assert_eq!(score(&half, &g, &classes[..1]).overall.correct, 0);
    let more = [[0.0, 0.0, 0.5, 0.49]];
    assert_eq!(score(&more, &g, &classes[..1]).overall.correct, 1);
}

#[test]
fn evaluation_does_not_depend_on_threads() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(tmp.path(), 40);
    let model = toy_model();
    let one = evaluate(&model, &ds, Split::Test, 3, 1, true).unwrap();
    let three = evaluate(&model, &ds, Split::Test, 3, 3, true).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.overall.total, ds.split(Split::Test).count());
}

#[test]
fn bench_reports_and_rejects_zero_iterations() {
    let model = toy_model();
    let inputs = bench_inputs(32, 4).unwrap();
    assert!(bench(&model, &inputs, 0, 0, 1).is_err());
    let r = bench(&model, &inputs, 6, 1, 2).unwrap();
    assert_eq!(r.single.samples, 6);
    assert_eq!(r.parallel.samples, 6);
    assert!(r.single.median_ms > 0.0 && r.single.p95_ms >= r.single.median_ms);
}

#[test]
fn latency_summary_of_known_samples() {
    let s = LatencyStats::from_samples(&[4.0, 1.0, 3.0, 2.0], 0.5);
    assert_eq!(s.mean_ms, 2.5);
    assert_eq!(s.median_ms, 2.5);
    assert_eq!(s.p95_ms, 4.0);
    assert_eq!(s.fps, 8.0);
    let sd = (5.0f64 / 3.0).sqrt();
    assert!((s.ci95_ms - 1.96 * sd / 2.0).abs() < 1e-12);
}

#[test]
fn visualize_writes_heatmaps_and_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = toy_dataset(&tmp.path().join("data"), 12);
    let model = toy_model();
    let ids: Vec<u64> = ds.records.iter().take(3).map(|r| r.scene_id).collect();
    let dest = tmp.path().join("vis");
    let files = visualize(&model, &ds, &ids, &dest).unwrap();
    let heads = model.cfg.heads;
    assert_eq!(files.len(), ids.len() * (2 + heads));
    let heatmaps = files
        .iter()
        .filter(|f| f.to_string_lossy().contains("_head"))
        .count();
    assert_eq!(heatmaps, ids.len() * heads);
    for f in files.iter().filter(|f| f.extension().unwrap() == "png") {
        decode_png(&std::fs::read(f).unwrap(), 32).unwrap();
    }
    for id in &ids {
        let text = std::fs::read_to_string(dest.join(format!("scene_{id}.txt"))).unwrap();
        let beta: Vec<f64> = text
            .lines()
            .find_map(|l| l.strip_prefix("beta "))
            .unwrap()
            .split(' ')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(beta.len(), 3);
        assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    assert!(visualize(&model, &ds, &[u64::MAX], &dest).is_err());
}
