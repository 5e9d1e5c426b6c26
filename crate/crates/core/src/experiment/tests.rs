use super::train::run_dir;
use super::*;
use crate::model::Model;
use crate::volume::{read_svol, PhantomConfig, Split, Volume};

fn small_dataset(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        train_cases: 3,
        val_cases: 2,
        phantom: PhantomConfig {
            in_plane: [48, 48],
            fine_slices: 16,
            thickness_choices: vec![1, 2],
            organ_semi_axes: [[12.0, 16.0], [10.0, 14.0], [5.0, 6.0]],
            organ_offset: [3.0, 3.0, 1.0],
            lesion_radius: [2.0, 3.0],
            ..Default::default()
        },
    }
}

fn small_experiment(out: &std::path::Path, manifest: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        manifest: manifest.into(),
        out_dir: out.into(),
        seeds: vec![3],
        model: ModelConfig {
            base_channels: 8,
            middle_blocks: 1,
            aspp_channels: 16,
            low_level_channels_reduced: 8,
            decoder_channels: 8,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            stacks_per_epoch: Some(4),
            ..Default::default()
        },
        augment: AugmentConfig {
            scale_range: [0.8, 1.2],
            crop: 32,
        },
        ..Default::default()
    }
}

#[test]
fn learning_rate_schedule() {
    let tc = TrainConfig::default();
    let mut lr = 0.001;
    for k in 0..80 {
        assert_eq!(tc.lr_at(k), 0.001 * 0.9f64.powi(k as i32));
        assert!((tc.lr_at(k) - lr).abs() < 1e-15);
        assert!((tc.lr_at(k) / (0.001 * (k as f64 * 0.9f64.ln()).exp()) - 1.0).abs() < 1e-13);
        lr *= 0.9;
    }
    assert_eq!(tc.lr_at(0), 0.001);
}

#[test]
fn ablation_flags() {
    assert!(Ablation::multi_branch(true, true).validate().is_ok());
    assert!(Ablation { md: false, sab: true, dcd: false, width_multiplier: 1 }.validate().is_err());
    assert!(Ablation { md: true, sab: false, dcd: false, width_multiplier: 3 }.validate().is_err());
    assert!(Ablation::baseline(0).validate().is_err());
    let labels: Vec<String> = Ablation::standard_variants(3).iter().map(|a| a.label()).collect();
    assert_eq!(labels, ["Baseline", "Baseline (3x)", "MD", "MD+SAB", "MD+DCD", "MD+SAB+DCD"]);
    let cfg = Ablation::baseline(3).apply(&ModelConfig::default());
    assert_eq!((cfg.variant, cfg.use_sab, cfg.width_multiplier), (Variant::SingleBranch, false, 3));
    let mut e = ExperimentConfig::default();
    e.ablation = Ablation::baseline(3);
    assert!(run_dir(&e, 2).ends_with("baseline_3x/seed_2"));
    e.ablation = Ablation::default();
    assert!(run_dir(&e, 0).ends_with("md_sab_dcd/seed_0"));
}

#[test]
fn config_round_trip_and_validation() {
    let c = ExperimentConfig::default();
    let text = c.to_toml_string().unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c);
    let partial = ExperimentConfig::from_toml_str("seeds = [7]\n[train]\nepochs = 80\n").unwrap();
    assert_eq!((partial.seeds.clone(), partial.train.epochs, partial.train.lr0), (vec![7], 80, 0.001));
    for bad in [
        "[train]\nlr_decay = 0.0\n",
        "[train]\nlr_decay = 1.5\n",
        "[train]\nlr0 = -1.0\n",
        "[ablation]\nmd = false\nsab = true\n",
        "seeds = []\n",
        "[augment]\ncrop = 40\n",
        "unknown = 1\n",
    ] {
        assert!(matches!(ExperimentConfig::from_toml_str(bad), Err(Error::Config(_))), "{bad}");
    }
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("exp.toml");
    std::fs::write(&p, "manifest = \"data/m.toml\"\n").unwrap();
    assert_eq!(ExperimentConfig::load(&p).unwrap().manifest, dir.path().join("data/m.toml"));
}

#[test]
fn dataset_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(&small_dataset(4), a.path()).unwrap();
    let mb = generate_dataset(&small_dataset(4), b.path()).unwrap();
    assert_eq!(ma.cases, mb.cases);
    assert_eq!(ma.split(Split::Train).count(), 3);
    assert_eq!(ma.split(Split::Val).count(), 2);
    for name in std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()) {
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap();
        assert_eq!(x, y, "{name:?}");
    }
    let mut bad = small_dataset(4);
    bad.phantom.lesion_radius = [20.0, 20.0];
    let err = generate_dataset(&bad, a.path()).unwrap_err();
    assert!(err.to_string().contains("case 0"), "{err}");
}

#[test]
fn default_dataset_shape() {
    let c = DatasetConfig::default();
    assert_eq!((c.train_cases, c.val_cases), (40, 10));
    assert_eq!(c.phantom.thickness_choices, [1, 2, 4]);
}

#[test]
fn training_is_deterministic_and_logged() {
    let data = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small_dataset(1), data.path()).unwrap();
    let runs = tempfile::tempdir().unwrap();
    let cfg = small_experiment(runs.path(), &data.path().join("manifest.toml"));
    let set = TrainingSet::load(&manifest, Split::Train, 5, &cfg.inference).unwrap();

    let dir_a = runs.path().join("a");
    let dir_b = runs.path().join("b");
    let (_, rec) = train_in_memory(&cfg, 3, &set, Some(&dir_a)).unwrap();
    train_in_memory(&cfg, 3, &set, Some(&dir_b)).unwrap();
    let ckpt_a = std::fs::read(dir_a.join("checkpoint.ckpt")).unwrap();
    assert_eq!(ckpt_a, std::fs::read(dir_b.join("checkpoint.ckpt")).unwrap());
    assert_eq!(rec.epochs.len(), 2);
    assert_eq!(rec.lambda, Some(1.2));
    for (k, e) in rec.epochs.iter().enumerate() {
        assert_eq!(e.lr, 0.001 * 0.9f64.powi(k as i32));
        assert_eq!(e.lambda, Some(1.2));
        assert!(e.total.is_finite() && e.dcd.is_some());
        assert_eq!(e.stacks, 4);
    }

    let plain = ExperimentConfig {
        ablation: Ablation::multi_branch(true, false),
        ..cfg.clone()
    };
    let (_, rec) = train_in_memory(&plain, 3, &set, None).unwrap();
    assert_eq!(rec.lambda, None);
    for e in &rec.epochs {
        assert_eq!(e.dcd, None);
        assert_eq!(e.total, e.dice);
    }

    let other_seed = train_in_memory(&cfg, 4, &set, Some(&runs.path().join("c"))).unwrap();
    drop(other_seed);
    assert_ne!(ckpt_a, std::fs::read(runs.path().join("c/checkpoint.ckpt")).unwrap());
}

#[test]
fn diverging_training_reports_a_numeric_error() {
    let data = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small_dataset(2), data.path()).unwrap();
    let runs = tempfile::tempdir().unwrap();
    let mut cfg = small_experiment(runs.path(), &data.path().join("manifest.toml"));
    cfg.train.lr0 = 1e30;
    cfg.train.epochs = 3;
    let set = TrainingSet::load(&manifest, Split::Train, 5, &cfg.inference).unwrap();
    match train_in_memory(&cfg, 0, &set, None) {
        Err(e @ Error::Numeric(_)) => {
            let msg = e.to_string();
            assert!(msg.contains("epoch") && msg.contains("batch") && msg.contains("lr"), "{msg}");
            assert_eq!(e.exit_code(), 3);
        }
        other => panic!("expected a numeric failure, got {:?}", other.map(|r| r.1.epochs)),
    }
}

#[test]
fn train_infer_eval_round_trip() {
    let data = tempfile::tempdir().unwrap();
    let manifest = generate_dataset(&small_dataset(5), data.path()).unwrap();
    let runs = tempfile::tempdir().unwrap();
    let cfg = small_experiment(runs.path(), &data.path().join("manifest.toml"));
    let rec = train(&cfg, 3).unwrap();
    let ckpt = rec.checkpoint.clone().unwrap();
    assert!(rec.report.as_ref().unwrap().exists());
    assert!(run_dir(&cfg, 3).join("run.json").exists());

    let model = Model::<f32>::load(&ckpt).unwrap();
    let preds = runs.path().join("preds");
    assert_eq!(predict_manifest(&model, &manifest, Split::Val, &preds, &cfg.inference).unwrap(), 2);
    for case in manifest.split(Split::Val) {
        let p: Volume<u8> = read_svol(prediction_path(&preds, case)).unwrap();
        let raw: Volume<f32> = read_svol(manifest.image_path(case)).unwrap();
        assert_eq!(p.dims(), raw.dims());
        assert!(p.data().iter().all(|&l| l <= 2));
    }
    let report = eval_predictions(&preds, &manifest, Some(Split::Val)).unwrap();
    assert!(report.is_complete());
    let again = eval_predictions(&preds, &manifest, Some(Split::Val)).unwrap();
    assert_eq!(report.to_text(), again.to_text());

    // references scored against themselves
    let refs = runs.path().join("refs");
    std::fs::create_dir_all(&refs).unwrap();
    for case in &manifest.cases {
        std::fs::copy(manifest.label_path(case), prediction_path(&refs, case)).unwrap();
    }
    std::fs::remove_file(prediction_path(&refs, &manifest.cases[1])).unwrap();
    let r = eval_predictions(&refs, &manifest, None).unwrap();
    assert_eq!(r.cases.len(), 4);
    assert_eq!(r.missing, vec![manifest.cases[1].id.clone()]);
    assert!(r.cases.iter().all(|c| c.organ.dice == 1.0 && c.organ.assd_mm == Some(0.0)));
    assert_eq!(r.organ.dice_global, 1.0);
}
