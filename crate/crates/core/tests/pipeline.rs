//! End-to-end pipeline behaviors on desk-scale data: stage composability,
//! determinism, model round-trips and single-image prediction.

use std::path::Path;

use biqa_core::backbone::load_checkpoint;
use biqa_core::config::*;
use biqa_core::experiment::{
    predict_image, prepare, run_experiment, stage_evaluate, stage_extract, stage_finetune,
    stage_train_svr, ExperimentError,
};
use biqa_core::fusion::{FusionScheme, PoolOp};
use biqa_core::imageops::DistortionKind;
use biqa_core::model::{load_model, BackboneRef, QualityModel};
use biqa_core::synth::{synth_dataset, SynthSpec};

fn tiny_synth(dir: &Path, count: usize, size: usize, seed: u64) {
    let spec = SynthSpec {
        count,
        size,
        kinds: vec![DistortionKind::GaussianBlur],
        levels: vec![0.0, 1.0, 2.0],
        base_mos: 90.0,
        mos_per_level: 30.0,
        ..SynthSpec::default()
    };
    synth_dataset(&spec, seed, dir).unwrap();
}

fn tiny_config(data_dir: &Path, out_dir: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSection {
            manifest: data_dir.join("manifest.csv"),
            scale_min: None,
            scale_max: None,
            name: None,
        },
        protocol: ProtocolSection { kind: ProtocolKind::Challenge, repeats: Some(2), seed: 11 },
        backbone: BackboneSection { kind: BackboneKind::Desk, input_size: 16, path: None },
        preprocess: PreprocessSection {
            mode: PreprocessKind::RandomCrops,
            resize_target: 16,
            crop_counts: vec![2, 3],
        },
        fusion: vec![
            FusionEntry { scheme: FusionScheme::PredictionPool, op: Some(PoolOp::Avg) },
            FusionEntry { scheme: FusionScheme::FeaturePool, op: Some(PoolOp::Max) },
            FusionEntry { scheme: FusionScheme::FeatureConcat, op: None },
        ],
        svr: SvrSection { max_passes: 40, ..SvrSection::default() },
        finetune: FinetuneSection {
            enabled: true,
            iterations: 30,
            batch_size: 8,
            learning_rate: 0.01,
            train_crops: Some(2),
            ..FinetuneSection::default()
        },
        evaluation: EvaluationSection::default(),
        output: OutputSection {
            dir: out_dir.to_path_buf(),
            emit_model: true,
            formats: vec!["json".into(), "table".into(), "plots".into()],
        },
    }
}

#[test]
fn staged_commands_match_run_byte_for_byte() {
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 24, 20, 3);

    let out_run = tempfile::tempdir().unwrap();
    let cfg_run = tiny_config(data.path(), out_run.path());
    run_experiment(&cfg_run).unwrap();

    let out_staged = tempfile::tempdir().unwrap();
    let cfg_staged = tiny_config(data.path(), out_staged.path());
    // Each stage gets its own context, as separate CLI invocations would.
    stage_finetune(&prepare(&cfg_staged).unwrap()).unwrap();
    stage_extract(&prepare(&cfg_staged).unwrap()).unwrap();
    stage_train_svr(&prepare(&cfg_staged).unwrap()).unwrap();
    stage_evaluate(&prepare(&cfg_staged).unwrap()).unwrap();

    let read = |dir: &Path, name: &str| std::fs::read(dir.join(name)).unwrap();
    // Reports are identical except for the differing output directory echoed
    // in the config provenance block; compare after normalizing that.
    let normalize = |dir: &Path| {
        String::from_utf8(read(dir, "report.json"))
            .unwrap()
            .replace(&dir.display().to_string(), "OUT")
    };
    assert_eq!(normalize(out_run.path()), normalize(out_staged.path()));
    assert_eq!(read(out_run.path(), "report.txt"), read(out_staged.path(), "report.txt"));
    assert_eq!(read(out_run.path(), "model.biqm"), read(out_staged.path(), "model.biqm"));
    assert_eq!(read(out_run.path(), "splits.txt"), read(out_staged.path(), "splits.txt"));
    assert!(out_run.path().join("scatter.svg").exists());
}

#[test]
fn rerun_with_same_seed_is_byte_identical() {
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 18, 20, 5);
    let out_a = tempfile::tempdir().unwrap();
    let out_b = tempfile::tempdir().unwrap();
    run_experiment(&tiny_config(data.path(), out_a.path())).unwrap();
    run_experiment(&tiny_config(data.path(), out_b.path())).unwrap();
    let norm = |dir: &Path| {
        std::fs::read_to_string(dir.join("report.json"))
            .unwrap()
            .replace(&dir.display().to_string(), "OUT")
    };
    assert_eq!(norm(out_a.path()), norm(out_b.path()));
    // A different seed changes the report.
    let out_c = tempfile::tempdir().unwrap();
    let mut cfg_c = tiny_config(data.path(), out_c.path());
    cfg_c.protocol.seed = 12;
    run_experiment(&cfg_c).unwrap();
    assert_ne!(norm(out_a.path()), norm(out_c.path()));
}

#[test]
fn emitted_model_predicts_and_round_trips() {
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 18, 20, 7);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(data.path(), out.path());
    let report = run_experiment(&cfg).unwrap();
    assert!(!report.winner.is_empty());

    let model_path = out.path().join("model.biqm");
    let ckpt_path = QualityModel::sibling_checkpoint_path(&model_path);
    let model = load_model(&model_path).unwrap();
    let (bundle, hash) = load_checkpoint(&ckpt_path).unwrap();
    model.verify_backbone(&hash).unwrap();
    match &model.backbone {
        BackboneRef::DeskCheckpoint { input_size, .. } => assert_eq!(*input_size, 16),
        other => panic!("unexpected backbone {other:?}"),
    }

    let image_path = data.path().join("images/synth00000.png");
    let outcome = predict_image(&model, &bundle, &image_path, None, 9).unwrap();
    assert!(outcome.score.is_finite());
    // Same seed, same score; prediction pooling exposes per-crop scores.
    let again = predict_image(&model, &bundle, &image_path, None, 9).unwrap();
    assert_eq!(outcome.score, again.score);
    if let Some(fusion) = &model.fusion {
        if fusion.scheme == FusionScheme::PredictionPool {
            let per_crop = outcome.per_crop.as_ref().expect("per-crop scores");
            let mean: f64 = per_crop.iter().sum::<f64>() / per_crop.len() as f64;
            assert!((mean - outcome.score).abs() < 1e-9);
        }
    }
}

#[test]
fn prediction_with_constant_svr_ignores_the_image() {
    // w = 0 makes the score equal b for any input image.
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 10, 20, 13);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(data.path(), out.path());
    run_experiment(&cfg).unwrap();
    let model_path = out.path().join("model.biqm");
    let mut model = load_model(&model_path).unwrap();
    let (bundle, _) = load_checkpoint(&QualityModel::sibling_checkpoint_path(&model_path)).unwrap();
    for w in &mut model.svr.w {
        *w = 0.0;
    }
    model.svr.b = 70.0;
    for (i, seed) in [(0usize, 1u64), (3, 2), (7, 3)] {
        let image = data.path().join(format!("images/synth{i:05}.png"));
        let outcome = predict_image(&model, &bundle, &image, None, seed).unwrap();
        assert_eq!(outcome.score, 70.0);
    }
}

#[test]
fn prediction_errors_are_typed() {
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 10, 20, 17);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(data.path(), out.path());
    run_experiment(&cfg).unwrap();
    let model_path = out.path().join("model.biqm");
    let model = load_model(&model_path).unwrap();
    let (bundle, _) = load_checkpoint(&QualityModel::sibling_checkpoint_path(&model_path)).unwrap();

    // Image smaller than the crop size: no implicit upscaling.
    let small_dir = tempfile::tempdir().unwrap();
    let small = biqa_core::imageops::RasterImage::constant(8, 8, [50.0; 3]).unwrap();
    let small_path = small_dir.path().join("small.png");
    biqa_core::imageops::save_png(&small, &small_path).unwrap();
    let err = predict_image(&model, &bundle, &small_path, None, 0).unwrap_err();
    assert!(matches!(err, ExperimentError::Image(_)), "{err}");

    // Wrong checkpoint for the model.
    let (other_bundle, other_hash) = {
        let net = biqa_core::backbone::DeskCnn::new(16, 999).unwrap();
        let bundle = biqa_core::backbone::BackboneBundle {
            net,
            mean: biqa_core::imageops::MeanImage::PerChannel([0.0; 3]),
        };
        let p = small_dir.path().join("other.biqn");
        let hash = biqa_core::backbone::save_checkpoint(&bundle, &p).unwrap();
        (bundle, hash)
    };
    assert!(model.verify_backbone(&other_hash).is_err());
    drop(other_bundle);
}

#[test]
fn evaluate_without_artifacts_reports_missing_assets() {
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 10, 20, 19);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(data.path(), out.path());
    let ctx = prepare(&cfg).unwrap();
    let err = stage_evaluate(&ctx).unwrap_err();
    assert!(matches!(err, ExperimentError::AssetMissing { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn central_crop_non_finetuned_flow() {
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 15, 24, 23);
    let out = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        preprocess: PreprocessSection {
            mode: PreprocessKind::CentralCrop,
            resize_target: 18,
            crop_counts: vec![],
        },
        fusion: vec![],
        finetune: FinetuneSection { enabled: false, ..FinetuneSection::default() },
        ..tiny_config(data.path(), out.path())
    };
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.configs.len(), 1);
    assert_eq!(report.configs[0].id, "central-crop");
    assert_eq!(report.winner, "central-crop");
    assert!(report.finetune.is_empty());
    // Shared backbone: single base checkpoint and feature file.
    assert!(out.path().join("checkpoints/base.biqn").exists());
    assert!(out.path().join("features/base.biqf").exists());
    assert!(!out.path().join("checkpoints/split_00.biqn").exists());
    // Model predicts through the central-crop path.
    let model = load_model(&out.path().join("model.biqm")).unwrap();
    let (bundle, _) =
        load_checkpoint(&QualityModel::sibling_checkpoint_path(&out.path().join("model.biqm")))
            .unwrap();
    let outcome =
        predict_image(&model, &bundle, &data.path().join("images/synth00001.png"), None, 0)
            .unwrap();
    assert!(outcome.per_crop.is_none());
    assert!(outcome.score.is_finite());
}

#[test]
fn legacy_protocol_selects_c_on_validation_fold() {
    // Build a manifest with reference groups by rewriting the synth one.
    let data = tempfile::tempdir().unwrap();
    tiny_synth(data.path(), 24, 20, 29);
    let manifest_path = data.path().join("manifest.csv");
    let text = std::fs::read_to_string(&manifest_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    for (i, line) in lines.iter_mut().enumerate().skip(1) {
        // Assign 8 reference groups round-robin; the trailing empty
        // ref_group column is replaced.
        let group = format!("ref{}", (i - 1) % 8);
        assert!(line.ends_with(','));
        line.push_str(&group);
    }
    std::fs::write(&manifest_path, lines.join("\n") + "\n").unwrap();

    let out = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(data.path(), out.path());
    cfg.protocol = ProtocolSection { kind: ProtocolKind::Legacy, repeats: Some(3), seed: 31 };
    cfg.svr.legacy_c_grid = vec![0.25, 1.0, 4.0];
    cfg.finetune.enabled = false;
    cfg.output.emit_model = false;
    let report = run_experiment(&cfg).unwrap();
    // 8 groups -> floor(0.6*8)=4 train, remainder split 2/2, 3 images each.
    assert!(report.fold_sizes.iter().all(|&(tr, va, te)| (tr, va, te) == (12, 6, 6)));
    for config in &report.configs {
        for split in &config.per_split {
            assert!([0.25, 1.0, 4.0].contains(&split.chosen_c));
        }
    }
}
