//! Train → calibrate → persist → evaluate, through the public API.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usnet::calibrate::{calibrate, naive_slimmable_eval, Average, CalibrationPlan};
use usnet::data::{load_checkpoint, save_checkpoint, synth_generate, CheckpointMeta, SynthKind};
use usnet::nn::BnMode;
use usnet::train::{evaluate, train, SgdOptimizer, TrainPlan};
use usnet::width::{SamplingRule, WidthConfig};
use usnet::{ArchSpec, Error, SlimmableNet};

fn trained(seed: u64, plan: &TrainPlan) -> SlimmableNet {
    let data = synth_generate(SynthKind::TwoGaussians, 256, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = ArchSpec::builtin("mlp").unwrap();
    let mut net = SlimmableNet::new(arch, WidthConfig::uniform(1.0, 0.25, 1), &mut rng).unwrap();
    train(&mut net, &mut SgdOptimizer::for_plan(plan), &data, plan, &mut rng).unwrap();
    net
}

fn plan(epochs: usize) -> TrainPlan {
    TrainPlan {
        epochs,
        batch_size: 32,
        ..TrainPlan::default()
    }
}

fn cal(widths: &[f64]) -> CalibrationPlan {
    CalibrationPlan {
        widths: widths.to_vec(),
        samples: None,
        average: Average::Exact,
        batch_size: 64,
        seed: 1,
    }
}

#[test]
fn same_seed_same_weights() {
    let a = trained(3, &plan(3));
    let b = trained(3, &plan(3));
    assert_eq!(a.parameter_values(), b.parameter_values());
    assert_ne!(a.parameter_values(), trained(4, &plan(3)).parameter_values());
}

#[test]
fn calibrated_checkpoint_carries_every_width() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    let mut net = trained(5, &plan(5));
    let data = synth_generate(SynthKind::TwoGaussians, 256, 5).unwrap();
    let widths = [0.25, 0.4, 0.55, 0.7, 0.85, 1.0];
    calibrate(&mut net, &data, &cal(&widths)).unwrap();
    save_checkpoint(
        &path,
        &net,
        &CheckpointMeta {
            seed: 5,
            log_tail: vec!["x".into()],
        },
    )
    .unwrap();
    let (back, meta) = load_checkpoint(&path).unwrap();
    assert_eq!(meta.seed, 5);
    assert_eq!(meta.log_tail, ["x"]);
    for r in widths {
        assert!(back.has_stats_at(r).unwrap(), "width {r}");
        assert_eq!(
            evaluate(&back, &data, r, 64).unwrap(),
            evaluate(&net, &data, r, 64).unwrap()
        );
    }
}

#[test]
fn evaluation_without_statistics_asks_for_calibration() {
    let mut net = trained(6, &plan(1));
    let data = synth_generate(SynthKind::TwoGaussians, 32, 6).unwrap();
    net.clear_stats();
    match evaluate(&net, &data, 0.5, 16) {
        Err(e @ Error::MissingStats { .. }) => assert!(e.to_string().contains("calibration")),
        other => panic!("expected missing statistics, got {other:?}"),
    }
}

#[test]
fn trained_widths_are_usable_without_calibration() {
    let net = trained(7, &plan(5));
    let data = synth_generate(SynthKind::TwoGaussians, 128, 70).unwrap();
    assert!(evaluate(&net, &data, 1.0, 64).unwrap() > 0.9);
    assert!(evaluate(&net, &data, 0.25, 64).unwrap() > 0.9);
}

#[test]
fn naive_evaluation_keeps_full_width_running_statistics() {
    let naive_plan = TrainPlan {
        n_widths: 1,
        rule: SamplingRule::MaxPlusRandom,
        distill: false,
        ..plan(3)
    };
    let mut net = trained(8, &naive_plan);
    let data = synth_generate(SynthKind::TwoGaussians, 128, 80).unwrap();
    let full = evaluate(&net, &data, 1.0, 64).unwrap();
    let rows = naive_slimmable_eval(&mut net, &data, &data, &cal(&[0.25, 1.0])).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1], (1.0, full));
    assert!(net.has_stats_at(0.25).unwrap());
}

#[test]
fn calibration_subset_sizes() {
    let data = synth_generate(SynthKind::TwoGaussians, 2048, 9).unwrap();
    let mut net = trained(9, &plan(2));
    let report = calibrate(
        &mut net,
        &data,
        &CalibrationPlan {
            samples: Some(1024),
            batch_size: 1024,
            ..cal(&[0.5])
        },
    )
    .unwrap();
    assert_eq!(report.examples, 1024);
    assert_eq!(report.batches, 1);
    assert!(evaluate(&net, &data, 0.5, 256).unwrap() > 0.9);
}

#[test]
fn diverging_training_reports_where() {
    let bad = TrainPlan {
        lr_start: 1e30,
        lr_end: 1e30,
        ..plan(2)
    };
    let data = synth_generate(SynthKind::TwoGaussians, 64, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let arch = ArchSpec::builtin("mlp").unwrap();
    let mut net = SlimmableNet::new(arch, WidthConfig::uniform(1.0, 0.25, 1), &mut rng).unwrap();
    let err = train(&mut net, &mut SgdOptimizer::for_plan(&bad), &data, &bad, &mut rng).unwrap_err();
    assert!(matches!(err, Error::NonFinite { .. }), "{err:?}");
}

#[test]
fn conv_path_trains_and_evaluates() {
    let data = synth_generate(SynthKind::GridTextures, 64, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut net = SlimmableNet::new(
        ArchSpec::builtin("small_cnn").unwrap(),
        WidthConfig::default(),
        &mut rng,
    )
    .unwrap();
    let p = TrainPlan {
        epochs: 1,
        batch_size: 16,
        ..TrainPlan::default()
    };
    let log = train(&mut net, &mut SgdOptimizer::for_plan(&p), &data, &p, &mut rng).unwrap();
    assert!(!log.records.is_empty());
    calibrate(
        &mut net,
        &data,
        &CalibrationPlan {
            batch_size: 16,
            ..cal(&[0.3, 0.8])
        },
    )
    .unwrap();
    let x = data.batch(&[0, 1]).0;
    for r in [0.3, 0.8] {
        let out = net.forward(&x, &net.resolve_ratio(r).unwrap(), BnMode::Eval).unwrap();
        assert_eq!(out.logits.shape(), &[2, 4]);
    }
}
