//! Training smoke tests on the desk-scale phantom.

use dccl::cli::ExperimentConfig;
use dccl::dcc::{LossConfig, LossMode};
use dccl::phantom::Phase;
use dccl::trainer::{evaluate, finetune, pretrain, Dataset, TrainConfig};

fn desk() -> (Dataset, TrainConfig) {
    let cfg = ExperimentConfig::desk();
    (Dataset::build(&cfg.dataset, 1).unwrap(), cfg.train)
}

#[test]
fn step_zero_loss_is_near_uniform_softmax() {
    let (data, cfg) = desk();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        steps_per_epoch: 1,
        ..cfg
    };
    let two_n = 2.0 * cfg.batch_patches as f64;
    let expected = two_n * (two_n - 1.0).ln();
    for seed in 1..=5 {
        let out = pretrain(&data, &cfg, &LossConfig::new(0.07, LossMode::Plain), seed).unwrap();
        let l0 = out.loss_curve[0];
        assert!((l0 - expected).abs() <= 0.2 * expected, "seed {seed}: {l0} vs {expected}");
    }
}

#[test]
fn smoothed_pretraining_loss_falls() {
    let (data, cfg) = desk();
    let out = pretrain(&data, &cfg, &LossConfig::new(0.07, LossMode::Dcc), 1).unwrap();
    let curve = &out.loss_curve;
    assert_eq!(curve.len(), cfg.pretrain_epochs * cfg.steps_per_epoch);
    let tail = curve[curve.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < curve[0], "smoothed {tail} vs step 0 {}", curve[0]);
}

#[test]
fn pretraining_is_deterministic_per_seed() {
    let (data, cfg) = desk();
    let cfg = TrainConfig {
        pretrain_epochs: 1,
        steps_per_epoch: 5,
        ..cfg
    };
    let loss = LossConfig::new(0.07, LossMode::Dcc);
    let a = pretrain(&data, &cfg, &loss, 4).unwrap();
    let b = pretrain(&data, &cfg, &loss, 4).unwrap();
    assert_eq!(a.loss_curve, b.loss_curve);
    assert_eq!(a.network, b.network);
}

#[test]
fn finetune_loss_falls_across_epochs() {
    let (data, cfg) = desk();
    let out = finetune(&data, None, &cfg, 1).unwrap();
    let epoch = |e: usize| {
        let s = &out.loss_curve[e * cfg.steps_per_epoch..(e + 1) * cfg.steps_per_epoch];
        s.iter().sum::<f64>() / s.len() as f64
    };
    let (first, last) = (epoch(0), epoch(cfg.finetune_epochs - 1));
    assert!(last < first, "first epoch {first}, last {last}");
}

#[test]
fn oracle_masks_and_overfitting_reach_high_dice() {
    let mut exp = ExperimentConfig::desk();
    exp.dataset.phases = vec![Phase::NC];
    exp.dataset.volumes_per_phase = 1;
    exp.dataset.test_volumes_per_phase = 0;
    exp.dataset.corruption_rate = 0.0;
    let data = Dataset::build(&exp.dataset, 3).unwrap();
    let cfg = TrainConfig {
        finetune_epochs: 10,
        finetune_lr: 1e-3,
        ..exp.train
    };
    let net = finetune(&data, None, &cfg, 3).unwrap().network;
    assert_eq!(data.train[0].coarse.mask, data.train[0].volume.labels);
    let eval = evaluate(&net, &data.train, &data.organs(), cfg.patch_size).unwrap();
    for (organ, d) in &eval.per_organ {
        assert!(*d > 0.9, "organ {organ}: Dice {d}");
    }
}
