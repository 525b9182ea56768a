use filtervit::data::{synth_dataset, AugmentPolicy, CropPolicy, Dataset, EvalPolicy, LabeledImage, Normalization};
use filtervit::filter_attention::Variant;
use filtervit::model::{build_model, ModelConfig, StageConfig};
use filtervit::optim::cosine_lr;
use filtervit::train::*;
use filtervit::{Error, Tensor};

fn tiny(train: usize, val: usize, epochs: usize, batch: usize) -> TrainConfig {
    let mut model = ModelConfig::reference(4);
    model.input_size = 16;
    model.stem.channels = 8;
    model.stages = vec![
        StageConfig::InvertedResidual { channels: 8, repeats: 1, stride: 1, expand_ratio: 2 },
        StageConfig::FilterAttention { k: None, depth: 1, heads: 2, mlp_ratio: 2 },
        StageConfig::PooledAttention { window: 2, depth: 1, heads: 2, mlp_ratio: 2 },
    ];
    TrainConfig {
        model,
        data: DataSpec::Synthetic { num_classes: 4, train, val, seed: 3 },
        epochs,
        batch_size: batch,
        optimizer: Default::default(),
        lr_max: Some(2e-3),
        lr_min: None,
        t_max: None,
        augment: AugmentPolicy {
            crop: Some(CropPolicy { scale: (1.0, 1.0), output: 16 }),
            flip_prob: 0.0,
            normalization: Normalization::default(),
        },
        eval: EvalPolicy { resize: 16, crop: 16, normalization: Normalization::default() },
        seed: 7,
        dtype: Default::default(),
    }
}

fn opts(dir: Option<&std::path::Path>) -> TrainOptions {
    TrainOptions { out_dir: dir.map(|d| d.to_path_buf()), ..Default::default() }
}

#[test]
fn one_epoch_of_eight_samples_at_batch_four_is_two_steps() {
    let out = train::<f32>(&tiny(8, 4, 1, 4), &opts(None)).unwrap();
    assert_eq!(out.steps, 2);
    assert_eq!(out.optimizer.step, 2);
    assert_eq!(out.metrics.len(), 1);
    let out = train::<f32>(&tiny(9, 4, 2, 4), &opts(None)).unwrap();
    assert_eq!(out.steps, 6);
}

#[test]
fn training_is_deterministic() {
    let cfg = tiny(12, 8, 2, 4);
    let a = train::<f32>(&cfg, &opts(None)).unwrap();
    let b = train::<f32>(&cfg, &opts(None)).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert!(a.metrics.iter().zip(&b.metrics).all(|(x, y)| x.same_numbers(y)));
    let mut other = cfg.clone();
    other.seed = 8;
    assert_ne!(train::<f32>(&other, &opts(None)).unwrap().model.params, a.model.params);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let cfg = tiny(12, 8, 6, 4);
    let full_dir = tempfile::tempdir().unwrap();
    let full = train::<f32>(&cfg, &opts(Some(full_dir.path()))).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = train::<f32>(&cfg, &TrainOptions { stop_after: Some(3), ..opts(Some(dir.path())) }).unwrap();
    assert_eq!(first.metrics.len(), 3);
    let resumed =
        train::<f32>(&cfg, &TrainOptions { resume: Some(dir.path().join("last.ckpt")), ..opts(Some(dir.path())) }).unwrap();
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.optimizer, full.optimizer);
    assert_eq!(resumed.metrics.len(), 6);
    assert!(resumed.metrics.iter().zip(&full.metrics).all(|(x, y)| x.same_numbers(y)));
    let on_disk = read_metrics_csv(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(on_disk.len(), 6);

    let mut changed = cfg.clone();
    changed.lr_max = Some(1e-3);
    let err = train::<f32>(&changed, &TrainOptions { resume: Some(dir.path().join("last.ckpt")), ..opts(None) });
    assert!(matches!(err, Err(Error::Config { .. })));
}

#[test]
fn run_directory_holds_metrics_and_checkpoints() {
    let cfg = tiny(8, 8, 3, 4);
    let dir = tempfile::tempdir().unwrap();
    let out = train::<f32>(&cfg, &opts(Some(dir.path()))).unwrap();
    for f in ["metrics.csv", "last.ckpt", "best.ckpt", "summary.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 3);
    let rows = read_metrics_csv(dir.path().join("metrics.csv")).unwrap();
    let schedule = cfg.schedule();
    for (i, r) in rows.iter().enumerate() {
        assert_eq!(r.epoch, i + 1);
        assert_eq!(r.lr, cosine_lr(&schedule, i).unwrap());
        assert!(r.same_numbers(&out.metrics[i]));
        assert!((0.0..=1.0).contains(&r.val_acc) && r.train_loss.is_finite());
    }
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 6);
    assert_eq!(summary["best_val_acc"].as_f64(), out.best_val_acc);
    assert!(MetricsRecord::parse_csv_row("1,2,3").is_err());
}

#[test]
fn evaluation_is_idempotent_and_checks_emptiness() {
    let cfg = tiny(4, 4, 1, 4);
    let model = build_model::<f32>(&cfg.model, 0).unwrap();
    let val = synth_dataset(4, 10, 1).unwrap().map(|im| filtervit::data::eval_transform(im, &cfg.eval));
    let before = model.params.clone();
    let a = evaluate(&model, &val, 3).unwrap();
    let b = evaluate(&model, &val, 4).unwrap();
    assert_eq!(a.count, 10);
    assert_eq!(a.accuracy, b.accuracy);
    assert!((a.loss - b.loss).abs() < 1e-6);
    assert_eq!(model.params, before);
    let empty = Dataset { images: Vec::<LabeledImage>::new(), num_classes: 4 };
    assert!(matches!(evaluate(&model, &empty, 4), Err(Error::Contract(_))));
}

#[test]
fn loss_and_accuracy_on_known_logits() {
    let perfect = Tensor::<f64>::from_f64(&[3, 3], &[50.0, 0.0, 0.0, 0.0, 50.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
    let (loss, correct) = loss_and_correct(&perfect, &[0, 1, 2]).unwrap();
    assert_eq!(correct, 3);
    assert!(loss < 1e-20);
    let uniform = Tensor::<f64>::from_f64(&[2, 4], &[0.3; 8]).unwrap();
    let (loss, correct) = loss_and_correct(&uniform, &[0, 2]).unwrap();
    assert_eq!(correct, 1);
    assert!((loss / 2.0 - 4f64.ln()).abs() < 1e-12);
    assert_eq!(argmax(&[1.0f32, 3.0, 3.0]), 1);
    assert!(loss_and_correct(&uniform, &[0]).is_err());
}

#[test]
fn exploding_updates_abort_with_non_finite_error() {
    let mut cfg = tiny(8, 4, 3, 4);
    cfg.lr_max = Some(1e36);
    cfg.lr_min = Some(1e36);
    match train::<f32>(&cfg, &opts(None)) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training survived an absurd learning rate"),
    }
}

#[test]
fn invalid_training_configs_are_rejected() {
    let mut cfg = tiny(8, 4, 1, 4);
    cfg.eval.crop = 12;
    assert!(matches!(train::<f32>(&cfg, &opts(None)), Err(Error::Config { field, .. }) if field == "eval.crop"));
    let mut cfg = tiny(8, 4, 1, 0);
    cfg.batch_size = 0;
    assert!(matches!(train::<f32>(&cfg, &opts(None)), Err(Error::Config { .. })));
    let mut cfg = tiny(8, 4, 5, 4);
    cfg.t_max = Some(3);
    assert!(train::<f32>(&cfg, &opts(None)).is_err());
    let json = serde_json::to_string(&tiny(8, 4, 1, 4)).unwrap();
    let back: TrainConfig = serde_json::from_str(&json).unwrap();
    assert_eq!(back, tiny(8, 4, 1, 4));
}

#[test]
fn seed_derivation_separates_paths() {
    assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
    assert_ne!(derive_seed(1, &[2]), derive_seed(2, &[2]));
}

#[test]
fn ablation_pairs_share_initial_evaluations() {
    let cfg = tiny(8, 8, 2, 4);
    let dir = tempfile::tempdir().unwrap();
    let report = ablate::<f32>(&cfg, &[0, 1], Some(dir.path())).unwrap();
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.seeds, 2);
    for seed in [0, 1] {
        let (f, d) = report.pair(seed).unwrap();
        assert_eq!((f.variant, d.variant), (Variant::Filter, Variant::Dropout));
        assert_eq!(f.initial, d.initial);
        assert_eq!(f.metrics.len(), 2);
        assert_eq!(d.metrics.len(), 2);
    }
    let csv = std::fs::read_to_string(dir.path().join("curves.csv")).unwrap();
    assert_eq!(csv, report.curves_csv());
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    assert!(csv.starts_with("epoch,seed,filter_val_acc,dropout_val_acc\n0,0,"));
    for f in ["summary.txt", "summary.json", "seed0/filter/metrics.csv", "seed1/dropout/last.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert!(report.table().contains("seeds"));
}
