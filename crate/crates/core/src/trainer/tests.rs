use super::*;
use crate::dataio::{select_holdout, ChannelStats};
use crate::study::{Study, StudyConfig};
use crate::synth::{generate, SynthConfig};
use ndarray::Array3;

fn small_model() -> ModelConfig {
    ModelConfig {
        hidden_dim: 8,
        attention_heads: 2,
        transformer_layers: 1,
        gcn_layers: 2,
        diffusion_steps: 2,
        dropout_rate: 0.1,
        gru_hidden: 8,
        time_dim: 4,
    }
}

fn small_study() -> Study {
    let cfg = SynthConfig {
        n_mainline: 4,
        n_ramp: 2,
        days: 2,
        seed: 3,
        ..Default::default()
    };
    let study = StudyConfig {
        k: 3,
        holdout_ratio: 0.34,
        ..Default::default()
    };
    Study::from_synth(&generate(&cfg).unwrap(), &study).unwrap()
}

fn small_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        window_length: 16,
        batch_size: 4,
        learning_rate: 3e-3,
        ..Default::default()
    }
}

fn unit_normalizer() -> Normalizer {
    let unit = ChannelStats { mean: 0.0, std: 1.0 };
    Normalizer {
        speed: unit,
        flow: unit,
        fit_source: "test".into(),
    }
}

#[test]
fn default_config_is_valid_and_bad_values_are_rejected() {
    TrainConfig::default().validate().unwrap();
    let bad = [
        TrainConfig { r_min: 0.0, ..Default::default() },
        TrainConfig { r_min: 0.95, ..Default::default() },
        TrainConfig { tau: 0.0, ..Default::default() },
        TrainConfig { e_warm: 0, ..Default::default() },
        TrainConfig { sigma: -1.0, ..Default::default() },
        TrainConfig { clip_norm: 0.0, ..Default::default() },
        TrainConfig { max_epochs: 0, ..Default::default() },
        TrainConfig { lr_floor: 1.0, ..Default::default() },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Param(_))), "{cfg:?}");
    }
}

#[test]
fn schedules_follow_their_formulas() {
    for e in 0..100 {
        assert_eq!(warmup_alpha(e, 10).unwrap(), (e as f64 / 10.0).min(1.0));
        assert_eq!(noise_decay(e, 30).unwrap(), (1.0 - e as f64 / 30.0).max(0.0));
    }
    assert_eq!(warmup_alpha(0, 10).unwrap(), 0.0);
    assert_eq!(noise_decay(0, 30).unwrap(), 1.0);
    assert_eq!(noise_decay(15, 30).unwrap(), 0.5);
    assert!(warmup_alpha(1, 0).is_err());
}

#[test]
fn cosine_lr_endpoints() {
    assert!((cosine_lr(1e-3, 1e-5, 0, 100) - 1e-3).abs() < 1e-15);
    assert!((cosine_lr(1e-3, 1e-5, 50, 100) - (1e-5 + (1e-3 - 1e-5) * 0.5)).abs() < 1e-15);
    assert!((cosine_lr(1e-3, 1e-5, 100, 100) - 1e-5).abs() < 1e-15);
    assert!((cosine_lr(1e-3, 1e-5, 500, 100) - 1e-5).abs() < 1e-15);
}

#[test]
fn visibility_ratio_stays_in_range() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let r = sample_visibility(&cfg, &mut rng).unwrap();
        assert!((cfg.r_min..=cfg.r_max).contains(&r));
    }
    let fixed = TrainConfig { r_min: 0.7, r_max: 0.7, ..Default::default() };
    assert_eq!(sample_visibility(&fixed, &mut rng).unwrap(), 0.7);
}

#[test]
fn mining_examples() {
    let p = mining_probabilities(&[0.3; 4], 0.5).unwrap();
    assert!(p.iter().all(|&x| (x - 0.25).abs() < 1e-15));
    let p = mining_probabilities(&[1.0, 0.0, 0.0, 0.0, 0.0], 0.1).unwrap();
    let e10 = 10f64.exp();
    assert!((p[0] - e10 / (e10 + 4.0)).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut all = mine_reconstruction_set(&[0.5, 0.1, 0.9], 0.5, 3, &mut rng).unwrap();
    all.sort();
    assert_eq!(all, vec![0, 1, 2]);
    assert!(mine_reconstruction_set(&[0.5, 0.1], 0.5, 3, &mut rng).is_err());
    assert!(mine_reconstruction_set(&[0.5], 0.0, 1, &mut rng).is_err());
    assert!(mine_reconstruction_set(&[0.5], 0.5, 0, &mut rng).unwrap().is_empty());
}

#[test]
fn mask_examples() {
    let h = HoldoutSet::new(5, vec![4]).unwrap();
    let m = build_masks(&[0, 1], &[2, 3], &h, 5, 3).unwrap();
    for i in 0..5 {
        for t in 0..3 {
            let sum = m.visible[[i, t]] as u8 + m.reconstruction[[i, t]] as u8 + (i == 4) as u8;
            assert_eq!(sum, 1);
            assert!(!(m.visible[[i, t]] && m.reconstruction[[i, t]]));
            assert_eq!(m.keep[[i, t]], i != 4);
        }
    }
    assert!(build_masks(&[0, 4], &[2, 3], &h, 5, 3).is_err());
    assert!(build_masks(&[0], &[2, 3], &h, 5, 3).is_err());
}

#[test]
fn plan_partitions_the_training_nodes() {
    let h = select_holdout(20, 0.2, 5).unwrap();
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = vec![0.1; 16];
    for e in 0..50 {
        let plan = plan_epoch(e, &cfg, &h, &d, &mut rng).unwrap();
        let expected = (plan.visibility_ratio * 16.0 + 1e-9).floor() as usize;
        assert_eq!(plan.visible.len(), expected);
        assert_eq!(plan.visible.len() + plan.reconstruction.len(), 16);
        plan.masks(&h, 4).unwrap();
    }
    assert!(plan_epoch(0, &cfg, &h, &[0.1; 3], &mut rng).is_err());
}

#[test]
fn noise_examples() {
    let n = unit_normalizer();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flow = Array3::from_shape_fn((2, 3, 5), |(b, i, t)| (b * 100 + i * 10 + t) as f64);
    let observed = Array3::from_elem((2, 3, 5), true);
    for (sigma, delta) in [(0.0, 1.0), (1.0, 0.0)] {
        let mut f = flow.clone();
        inject_poisson_noise(&mut f, &observed, &[0, 1, 2], sigma, delta, &n, &mut rng).unwrap();
        assert_eq!(f, flow);
    }
    assert_eq!(corrupt_rate(0.0, 1.0, &mut rng).unwrap(), 0.0);
    assert!(corrupt_rate(f64::NAN, 1.0, &mut rng).is_err());
    let mut f = flow.clone();
    inject_poisson_noise(&mut f, &observed, &[1], 1.0, 1.0, &n, &mut rng).unwrap();
    for i in [0, 2] {
        assert_eq!(f.index_axis(Axis(1), i), flow.index_axis(Axis(1), i));
    }
    assert!(f.iter().all(|&x| x >= 0.0));
    assert!(inject_poisson_noise(&mut f, &observed, &[1], 1.0, 1.5, &n, &mut rng).is_err());
}

#[test]
fn noise_skips_missing_entries() {
    let n = unit_normalizer();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flow = Array3::from_elem((1, 1, 50), 100.0);
    let mut observed = Array3::from_elem((1, 1, 50), true);
    observed[[0, 0, 7]] = false;
    let mut f = flow.clone();
    inject_poisson_noise(&mut f, &observed, &[0], 1.0, 1.0, &n, &mut rng).unwrap();
    assert_eq!(f[[0, 0, 7]], 100.0);
    assert!((0..50).filter(|&t| t != 7).any(|t| f[[0, 0, t]] != 100.0));
}

#[test]
fn loss_examples() {
    let p = ndarray::arr3(&[[[1.0, 2.0]]]);
    let y = ndarray::arr3(&[[[0.0, 5.0]]]);
    let all = Array3::from_elem((1, 1, 2), true);
    assert_eq!(masked_mae(p.view(), y.view(), all.view()).unwrap(), 2.0);
    assert_eq!(masked_mae(p.view(), p.view(), all.view()).unwrap(), 0.0);
    let none = Array3::from_elem((1, 1, 2), false);
    assert!(matches!(masked_mae(p.view(), y.view(), none.view()), Err(Error::EmptyMask(_))));
    assert_eq!(blend(Some(2.0), Some(4.0), 0.25, 0.0, 1e-4).unwrap(), 2.5);
    assert_eq!(blend(Some(2.0), Some(4.0), 0.0, 3.0, 0.5).unwrap(), 3.5);
    assert_eq!(blend(Some(2.0), Some(4.0), 1.0, 0.0, 0.0).unwrap(), 4.0);
    assert_eq!(blend(None, Some(4.0), 0.25, 0.0, 0.0).unwrap(), 4.0);
    assert_eq!(blend(Some(2.0), None, 0.25, 0.0, 0.0).unwrap(), 2.0);
    assert!(blend(None, None, 0.5, 0.0, 0.0).is_err());
}

#[test]
fn combined_loss_matches_the_scalar_blend() {
    let dev = candle_core::Device::Cpu;
    let pred = Tensor::new(&[[[1.0f64, 2.0, 3.0, 4.0]]], &dev).unwrap();
    let target = Tensor::new(&[[[0.0f64, 0.0, 0.0, 0.0]]], &dev).unwrap();
    let mv = Tensor::new(&[[[1.0f64, 1.0, 0.0, 0.0]]], &dev).unwrap();
    let mr = Tensor::new(&[[[0.0f64, 0.0, 1.0, 1.0]]], &dev).unwrap();
    let gate = Tensor::new(2.0f64, &dev).unwrap();
    let parts = combined_loss(&pred, &target, (&mv, 2.0), (&mr, 2.0), 0.25, &gate, 0.5).unwrap();
    assert_eq!(parts.visible, Some(1.5));
    assert_eq!(parts.reconstruction, Some(3.5));
    let expected = 0.75 * 1.5 + 0.25 * 3.5 + 1.0;
    assert!((scalar(&parts.total).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn smape_difficulty_is_scale_free() {
    assert_eq!(smape_difficulty(std::iter::empty(), 1e-8), None);
    for y in [10.0, 1000.0] {
        let d = smape_difficulty([(y * 1.01, y)], 1e-8).unwrap();
        assert!((d - 0.01).abs() < 0.01 * 0.01);
    }
    assert!((smape_difficulty([(0.0, 0.0)], 1e-8).unwrap()).abs() < 1e-12);
    assert!((smape_difficulty([(0.0, 5.0)], 1e-8).unwrap() - 2.0).abs() < 1e-8);
}

#[test]
fn speed_monitor_flags_changed_speed() {
    let study = small_study();
    let batches = window(&study.train, &study.normalizer, 16, 16, 2).unwrap();
    let mut mon = SpeedContractMonitor::default();
    let mut x = plan::mask_flow(&batches[0].x, &[0, 1]);
    mon.check(Stage::Train, &batches[0], &x);
    assert!(mon.violations.is_empty());
    x[[0, 0, 0, SPEED]] = 0.0;
    mon.check(Stage::Train, &batches[0], &x);
    assert_eq!(mon.violations.len(), 1);
}

#[test]
fn training_input_hides_flow_and_keeps_speed() {
    let study = small_study();
    let batch = &window(&study.train, &study.normalizer, 16, 16, 2).unwrap()[0];
    let cfg = small_train(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let d = vec![0.0; study.holdout.training_nodes().len()];
    let plan = plan_epoch(0, &cfg, &study.holdout, &d, &mut rng).unwrap();
    let before = batch.clone();
    let x = plan::training_input(&batch.x, &batch.observed, &plan, &study.holdout, &cfg, &study.normalizer, &mut rng)
        .unwrap();
    assert_eq!(*batch, before);
    assert_eq!(x.index_axis(Axis(3), SPEED), batch.x.index_axis(Axis(3), SPEED));
    for &v in plan.reconstruction.iter().chain(&study.holdout.indices) {
        assert!(x.index_axis(Axis(1), v).index_axis(Axis(2), crate::dataio::FLOW).iter().all(|&f| f == 0.0));
    }
}

#[test]
fn training_improves_on_a_small_synthetic_set() {
    let study = small_study();
    let out = study.train(&small_model(), &small_train(12), &mut NoHooks).unwrap();
    let m = &out.manifest;
    assert!(!m.epochs.is_empty());
    assert!(m.best_val_loss < m.initial_val_loss, "{} !< {}", m.best_val_loss, m.initial_val_loss);
    assert_eq!(m.holdout.len(), study.holdout.len());
}

#[test]
fn identical_seeds_give_identical_runs() {
    let study = small_study();
    let cfg = small_train(3);
    let a = study.train(&small_model(), &cfg, &mut NoHooks).unwrap();
    let b = study.train(&small_model(), &cfg, &mut NoHooks).unwrap();
    assert_eq!(a.manifest, b.manifest);
    let c = study
        .train(&small_model(), &TrainConfig { seed: 1, ..cfg }, &mut NoHooks)
        .unwrap();
    assert_ne!(a.manifest.epochs, c.manifest.epochs);
}

#[test]
fn zero_patience_stops_after_first_non_improving_epoch() {
    let study = small_study();
    let cfg = TrainConfig { patience: 0, ..small_train(40) };
    let m = study.train(&small_model(), &cfg, &mut NoHooks).unwrap().manifest;
    if m.stop_reason == "patience" {
        let last = m.epochs.last().unwrap();
        assert!(!last.improved);
        assert!(m.epochs[..m.epochs.len() - 1].iter().all(|e| e.improved));
    } else {
        assert!(m.epochs.iter().all(|e| e.improved));
    }
}

#[test]
fn one_epoch_gives_one_record() {
    let study = small_study();
    let m = study.train(&small_model(), &small_train(1), &mut NoHooks).unwrap().manifest;
    assert_eq!(m.epochs.len(), 1);
    assert_eq!(m.best_epoch, 0);
}

#[test]
fn speed_is_never_touched_during_training() {
    let study = small_study();
    let mut mon = SpeedContractMonitor::default();
    study.train(&small_model(), &small_train(3), &mut mon).unwrap();
    assert!(mon.batches > 0);
    assert!(mon.violations.is_empty(), "{:?}", mon.violations);
}

#[test]
fn impute_is_deterministic_and_in_range() {
    let study = small_study();
    let out = study.train(&small_model(), &small_train(4), &mut NoHooks).unwrap();
    let meta = out.manifest.checkpoint_meta(&study.holdout);
    let a = study.hint_predictions(&out.model, &meta, 4).unwrap();
    let b = study.hint_predictions(&out.model, &meta, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dim(), (study.holdout.len(), study.test.t()));
    let max = study.test.flow.iter().copied().fold(0.0, f64::max);
    assert!(a.iter().all(|&v| (0.0..=2.0 * max).contains(&v)));
    let none = impute(&out.model, &meta, &study.test, &study.features, &study.adjacency, &[], 4, &mut NoHooks)
        .unwrap();
    assert_eq!(none.nrows(), 0);
}

#[test]
fn impute_refuses_a_different_schema() {
    let study = small_study();
    let out = study.train(&small_model(), &small_train(1), &mut NoHooks).unwrap();
    let mut meta = out.manifest.checkpoint_meta(&study.holdout);
    meta.schema_hash = "0000".into();
    let err = study.hint_predictions(&out.model, &meta, 4).unwrap_err();
    assert!(matches!(err, Error::Compat(_)));
}

#[test]
fn manifest_round_trips_through_json() {
    let study = small_study();
    let m = study.train(&small_model(), &small_train(1), &mut NoHooks).unwrap().manifest;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    m.write(&path).unwrap();
    assert_eq!(TrainManifest::read(&path).unwrap(), m);
}
