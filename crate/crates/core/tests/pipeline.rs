use air_core::checkpoint::Checkpoint;
use air_core::config::ExperimentConfig;
use air_core::eval::{evaluate, EvalConfig};
use air_core::finetune::{finetune, lp_aff, Classifier, FinetuneConfig, FinetuneMode};
use air_core::kmeans::purity;
use air_core::report::{read_metrics, write_report};
use air_core::train::{pretrain, TrainMode};

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml(
        r#"
        [data.synthetic]
        samples = 128
        test_samples = 64
        size = 16
        [train]
        epochs = 3
        batch_size = 32
        decay_period = 1
        [finetune]
        epochs = 5
        lr = 0.05
        batch_size = 32
        [eval]
        severities = [1, 5]
        corruptions = ["gaussian_noise", "contrast"]
        "#,
    )
    .unwrap()
}

#[test]
fn pretrain_finetune_evaluate_report() {
    let cfg = small();
    let train = cfg.train_set().unwrap();
    let test = cfg.test_set().unwrap();
    let spec = cfg.model.spec(train.descriptor.sample_shape());
    let dir = tempfile::tempdir().unwrap();
    let run = pretrain(&train, &spec, &cfg.train, Some(dir.path()), &mut |_| {}).unwrap();

    let logged = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(logged, run.metrics);
    for (e, m) in logged.iter().enumerate() {
        let (mu, omega) = cfg.train.epoch_schedule(e).unwrap();
        assert_eq!((m.mu, m.omega), (mu, omega));
    }
    let path = dir.path().join("encoder.ckpt");
    let restored = Checkpoint::load(&path, Some(&spec))
        .unwrap()
        .encoder(&path)
        .unwrap();
    assert_eq!(restored.params(), run.encoder.params());

    let slf = finetune(
        &restored,
        &train,
        &FinetuneConfig {
            mode: FinetuneMode::Slf,
            ..cfg.finetune.clone()
        },
    )
    .unwrap();
    let clf_path = dir.path().join("classifier_slf.ckpt");
    slf.classifier
        .save(&clf_path, cfg.finetune.epochs, cfg.seed)
        .unwrap();
    let clf = Classifier::load(&clf_path, Some(&spec)).unwrap();

    let report = evaluate(&clf, &test, &cfg.eval).unwrap();
    assert!(report.standard_acc > 0.25, "{report:?}");
    assert!(report.robust_acc <= report.standard_acc);
    assert_eq!(report.corruption.len(), 2);
    assert!(report.corruption.values().all(|s| s.len() == 2));
    std::fs::write(
        dir.path().join("eval_slf.json"),
        serde_json::to_string(&report).unwrap(),
    )
    .unwrap();

    let files = write_report(dir.path(), &dir.path().join("report")).unwrap();
    let csv = std::fs::read_to_string(&files.metrics_csv).unwrap();
    let last = run.metrics.last().unwrap();
    assert!(csv
        .lines()
        .last()
        .unwrap()
        .ends_with(&format!(",{}", last.total)));
    let table = std::fs::read_to_string(files.results_csv.unwrap()).unwrap();
    assert!(table
        .lines()
        .nth(1)
        .unwrap()
        .contains(&report.standard_acc.to_string()));
}

#[test]
fn full_finetuning_fits_separable_blobs() {
    let cfg = small();
    let train = cfg.train_set().unwrap();
    let spec = cfg.model.spec(train.descriptor.sample_shape());
    let run = pretrain(&train, &spec, &cfg.train, None, &mut |_| {}).unwrap();
    let aff = FinetuneConfig {
        mode: FinetuneMode::Aff,
        epochs: 8,
        ..cfg.finetune.clone()
    };
    let report = finetune(&run.encoder, &train, &aff).unwrap();
    let acc = report
        .classifier
        .accuracy(train.images(), train.labels().unwrap())
        .unwrap();
    assert!(acc >= 0.9, "natural accuracy {acc}");
}

#[test]
fn pseudo_labels_follow_the_clusters() {
    let cfg = small();
    let train = cfg.train_set().unwrap();
    let spec = cfg.model.spec(train.descriptor.sample_shape());
    let run = pretrain(&train, &spec, &cfg.train, None, &mut |_| {}).unwrap();
    let ft = FinetuneConfig {
        epochs: 1,
        ..cfg.finetune.clone()
    };
    let (report, clustering) = lp_aff(&run.encoder, &train, 4, &ft).unwrap();
    assert_eq!(clustering.assignments.len(), train.len());
    assert!(purity(&clustering.assignments, train.labels().unwrap()) >= 0.25);
    assert_eq!(report.classifier.classes(), 4);
}

#[test]
fn simclr_degenerate_setting_has_no_regularizer() {
    let cfg = ExperimentConfig::from_toml(
        r#"
        [data.synthetic]
        samples = 64
        size = 16
        [train]
        epochs = 1
        batch_size = 32
        mode = "acl"
        [loss]
        lambda1 = 0.0
        lambda2 = 0.0
        [attack]
        eps = 0.0
        steps = 0
        "#,
    )
    .unwrap();
    assert_eq!(cfg.train.mode, TrainMode::Acl);
    let train = cfg.train_set().unwrap();
    let spec = cfg.model.spec(train.descriptor.sample_shape());
    let run = pretrain(&train, &spec, &cfg.train, None, &mut |_| {}).unwrap();
    let m = &run.metrics[0];
    assert_eq!((m.mu, m.omega), (1.0, 0.0));
    assert_eq!(m.total, m.acl_loss);
}

#[test]
fn evaluation_defaults_cover_every_corruption() {
    let e = EvalConfig::default();
    assert_eq!(e.corruptions.len(), 6);
    assert_eq!(e.attack.steps, 20);
}
