use std::collections::HashMap;

use fsad_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
use fsad_core::config::RunConfig;
use fsad_core::encoders::FrozenEncoders;
use fsad_core::evalkit::{evaluate, infer, transfer_eval, EvalReport, ModelOrigin};
use fsad_core::phantom::{build_dataset, support_images, FamilyId, Manifest};
use fsad_core::synthesis::SynthesisTask;
use fsad_core::trainer::{grad_check, sample_batch, sample_episode, train, GradCheckOptions};
use fsad_core::{Error, Image};
use std::sync::Arc;

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.steps = 3;
    cfg.train.batch_size = 4;
    cfg.data.k = 4;
    cfg.data.n_test_normal = 6;
    cfg.data.n_test_anomaly = 6;
    cfg
}

fn support(cfg: &RunConfig) -> Vec<Image> {
    support_images(&cfg.data, cfg.seed).unwrap()
}

#[test]
fn training_is_deterministic_and_leaves_encoders_frozen() {
    let cfg = small_config();
    let enc = cfg.build_encoders().unwrap();
    let digest = enc.digest().to_string();
    let run = || {
        let mut model = cfg.init_model(enc.clone()).unwrap();
        let report = train(
            &mut model,
            &support(&cfg),
            &cfg.train,
            &cfg.synthesis,
            cfg.train_seed(),
        )
        .unwrap();
        (model, report)
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(ra.history.len(), 3);
    assert_eq!(ra.history, rb.history);
    for ((na, _, va), (_, _, vb)) in a.tensors().into_iter().zip(b.tensors()) {
        assert_eq!(va, vb, "tensor {na} differs");
    }
    let rebuilt = FrozenEncoders::init(&cfg.encoder, cfg.encoder_seed).unwrap();
    assert_eq!(rebuilt.digest(), digest);
    assert_eq!(a.encoders().digest(), digest);
}

#[test]
fn zero_steps_leaves_parameters_unchanged() {
    let mut cfg = small_config();
    cfg.train.steps = 0;
    let mut model = cfg.init_model(cfg.build_encoders().unwrap()).unwrap();
    let before: Vec<Vec<f64>> = model
        .tensors()
        .into_iter()
        .map(|(_, _, v)| v.to_vec())
        .collect();
    let report = train(&mut model, &support(&cfg), &cfg.train, &cfg.synthesis, 1).unwrap();
    assert!(report.history.is_empty());
    let after: Vec<Vec<f64>> = model
        .tensors()
        .into_iter()
        .map(|(_, _, v)| v.to_vec())
        .collect();
    assert_eq!(before, after);
}

#[test]
fn episodes_respect_p_empty_and_task_balance() {
    let cfg = small_config();
    let sup = support(&cfg);
    let all_empty = sample_episode(&sup, 16, 1.0, &cfg.synthesis, 64, 3).unwrap();
    assert!(all_empty
        .iter()
        .all(|e| e.mask.is_empty() && e.task.is_none()));

    let a = sample_episode(&sup, 8, 0.2, &cfg.synthesis, 64, 5).unwrap();
    let b = sample_episode(&sup, 8, 0.2, &cfg.synthesis, 64, 5).unwrap();
    assert_eq!(a, b);

    let episodes = sample_episode(&sup, 3000, 0.0, &cfg.synthesis, 64, 7).unwrap();
    let mut counts: HashMap<SynthesisTask, usize> = HashMap::new();
    for e in &episodes {
        *counts.entry(e.task.unwrap()).or_default() += 1;
    }
    for task in SynthesisTask::ALL {
        let n = counts.get(&task).copied().unwrap_or(0);
        assert!((900..=1100).contains(&n), "{task}: {n}");
    }
}

#[test]
fn gradient_check_and_step_convergence() {
    let cfg = small_config();
    let model = cfg.init_model(cfg.build_encoders().unwrap()).unwrap();
    let batch = sample_batch(&model, &support(&cfg), 2, 0.0, &cfg.synthesis, 4).unwrap();
    let check = |step: f64, corrupt: bool| {
        let opts = GradCheckOptions {
            coordinates: 24,
            step,
            seed: 2,
            corrupt_gradient: corrupt,
        };
        grad_check(&model, &batch, &cfg.train.loss, &opts)
            .unwrap()
            .max_rel_error
    };
    let fine = check(1e-5, false);
    let coarse = check(1e-4, false);
    assert!(fine < 1e-4, "{fine}");
    assert!(fine <= coarse || fine < 1e-6, "{fine} vs {coarse}");
    assert!(check(1e-5, true) > 1e-2);
}

#[test]
fn checkpoint_round_trip_and_guards() {
    let cfg = small_config();
    let enc = cfg.build_encoders().unwrap();
    let mut model = cfg.init_model(enc.clone()).unwrap();
    train(&mut model, &support(&cfg), &cfg.train, &cfg.synthesis, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let meta = CheckpointMeta {
        steps: 3,
        seed: cfg.seed,
        family: Some(FamilyId::Blob),
        loss_history: None,
        config_digest: Some(cfg.digest()),
    };
    save_checkpoint(&model, &meta, &path).unwrap();
    let (loaded, loaded_meta) = load_checkpoint(&path).unwrap();
    assert_eq!(loaded_meta, meta);
    let probe = &support(&cfg)[0];
    assert_eq!(
        infer(probe, &model).unwrap(),
        infer(probe, &loaded).unwrap()
    );

    let other = Arc::new(FrozenEncoders::init(&cfg.encoder, cfg.encoder_seed + 1).unwrap());
    let ckpt = Checkpoint::read(&path).unwrap();
    assert!(matches!(
        ckpt.into_model(other),
        Err(Error::Incompatible(_))
    ));

    let bytes = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format { .. })));
    std::fs::write(&cut, &bytes[..20]).unwrap();
    assert!(matches!(load_checkpoint(&cut), Err(Error::Format { .. })));
}

#[test]
fn evaluation_reports_and_transfer() {
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let blob = build_dataset(&cfg.data, &cfg.synthesis, 1, dir.path().join("blob")).unwrap();
    let mut ring_spec = cfg.data.clone();
    ring_spec.family = FamilyId::Ring;
    let ring = build_dataset(&ring_spec, &cfg.synthesis, 2, dir.path().join("ring")).unwrap();
    let model = cfg.init_model(cfg.build_encoders().unwrap()).unwrap();
    let origin = ModelOrigin {
        family: Some(FamilyId::Blob),
        seed: Some(cfg.seed),
        ..ModelOrigin::default()
    };

    let eval = evaluate(&model, &blob, &origin).unwrap();
    assert_eq!(eval.results.len(), 12);
    for r in &eval.results {
        assert_eq!(r.score, r.map.max());
        assert!(r.map.as_slice().iter().all(|&v| v > 0.0 && v < 1.0));
    }
    let report = &eval.report;
    assert!((0.0..=1.0).contains(&report.image_auroc));
    assert!(report.pixel_auroc.is_some());

    let path = dir.path().join("report.json");
    report.save(&path).unwrap();
    assert_eq!(&EvalReport::load(&path).unwrap(), report);

    let t = transfer_eval(&model, &ring, &origin).unwrap().report;
    assert!(t.transfer);
    assert_eq!(t.provenance.train_family, Some(FamilyId::Blob));
    assert_eq!(t.provenance.test_family, FamilyId::Ring);
    let json = std::fs::read_to_string(&path).unwrap();
    assert!(json.contains("train_seed") && json.contains("test_family"));

    let reloaded = Manifest::load(dir.path().join("ring").join("manifest.json")).unwrap();
    assert_eq!(reloaded.family, FamilyId::Ring);
}

#[test]
fn default_toy_run_descends() {
    let cfg = RunConfig::default();
    let mut model = cfg.init_model(cfg.build_encoders().unwrap()).unwrap();
    let report = train(
        &mut model,
        &support(&cfg),
        &cfg.train,
        &cfg.synthesis,
        cfg.train_seed(),
    )
    .unwrap();
    let n = report.history.len();
    assert_eq!(n, 500);
    let (head, tail) = (report.window_mean(0..50), report.window_mean(n - 50..n));
    assert!(tail < head, "trailing {tail} vs leading {head}");
}
