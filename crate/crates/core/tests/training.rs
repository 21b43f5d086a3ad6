mod common;

use common::*;
use m2gan::generator::PipelineConfig;
use m2gan::losses::LossWeights;
use m2gan::training::{
    discriminator_update, generator_objective, lr_schedule, read_loss_log, train_step, Ablation, GeneratorPass, Models,
    OptimStates, TrainBatch, TrainConfig, Trainer, LOSS_LOG,
};

fn tiny_cfg(ablation: Ablation) -> TrainConfig {
    TrainConfig { ablation, batch_size: 2, crop_size: Some(32), disc_features: 8, seed: 5, ..TrainConfig::default() }
}

struct Prints {
    gen: u64,
    img: u64,
    seg: u64,
}

fn prints(m: &Models) -> Prints {
    Prints {
        gen: m.generator.params.fingerprint(),
        img: m.d_img.as_ref().unwrap().params.fingerprint(),
        seg: m.d_seg.as_ref().unwrap().params.fingerprint(),
    }
}

#[test]
fn each_update_touches_only_its_own_network() {
    let cfg = tiny_cfg(Ablation::Full);
    let mut models = Models::new(PipelineConfig::tiny(), &cfg).unwrap();
    // A non-zero head gives every generator parameter a gradient.
    models.generator.params.iter_mut().for_each(|(_, t)| {
        if t.data().iter().all(|&v| v == 0.0) {
            t.data_mut().iter_mut().for_each(|v| *v = 0.01);
        }
    });
    let mut opts = OptimStates::new(&models, &cfg).unwrap();
    let pairs = toy_pairs(2, 32);
    let batch = TrainBatch::from_pairs(&pairs).unwrap();
    let pass = GeneratorPass::build(&models, &batch, None).unwrap();
    let fakes = pass.estimate_values();
    let (seg_real, seg_fakes) = pass.segmentation_values(&batch, models.segmenter.temperature).unwrap();

    let p0 = prints(&models);
    let d = models.d_img.as_mut().unwrap();
    discriminator_update(d, opts.d_img.as_mut().unwrap(), &batch.clean, &fakes, cfg.adv_mode, 1e-3, 0).unwrap();
    let p1 = prints(&models);
    assert!(p1.img != p0.img && p1.gen == p0.gen && p1.seg == p0.seg);

    let d = models.d_seg.as_mut().unwrap();
    discriminator_update(d, opts.d_seg.as_mut().unwrap(), &seg_real, &seg_fakes, cfg.adv_mode, 1e-3, 0).unwrap();
    let p2 = prints(&models);
    assert!(p2.seg != p1.seg && p2.gen == p1.gen && p2.img == p1.img);

    let (_, grads) = generator_objective(&models, &batch, &cfg).unwrap();
    opts.generator.step(&mut models.generator.params, &grads, 1e-3).unwrap();
    let p3 = prints(&models);
    assert!(p3.gen != p2.gen && p3.img == p2.img && p3.seg == p2.seg);
}

#[test]
fn no_disc_equals_zero_adversarial_weight() {
    let no_disc = tiny_cfg(Ablation::NoDisc);
    let zero_w =
        TrainConfig { weights: LossWeights { adversarial: 0.0, ..LossWeights::default() }, ..tiny_cfg(Ablation::Full) };
    let a = Models::new(PipelineConfig::tiny(), &no_disc).unwrap();
    let mut b = Models::new(PipelineConfig::tiny(), &zero_w).unwrap();
    assert!(a.d_img.is_none() && a.d_seg.is_none());
    assert!(b.d_img.is_some() && b.d_seg.is_some());
    b.generator = a.generator.clone();
    let batch = TrainBatch::from_pairs(&toy_pairs(2, 32)).unwrap();
    let (la, ga) = generator_objective(&a, &batch, &no_disc).unwrap();
    let (lb, gb) = generator_objective(&b, &batch, &zero_w).unwrap();
    assert_eq!(la.adversarial, None);
    assert!(lb.adversarial.is_some());
    assert_eq!(la.total, lb.total);
    for (name, t) in ga.iter() {
        assert_eq!(t, gb.require(name).unwrap(), "{name}");
    }
}

#[test]
fn one_small_step_lowers_the_generator_objective() {
    let cfg = tiny_cfg(Ablation::NoDisc);
    let mut models = Models::new(PipelineConfig::tiny(), &cfg).unwrap();
    // Off the identity, where the MAE kink at zero error sits.
    let heads: Vec<String> = models.generator.params.names().filter(|n| n.ends_with("head.weight")).cloned().collect();
    for (i, name) in heads.iter().enumerate() {
        let shape = models.generator.params.require(name).unwrap().shape();
        models.generator.params.assign(name, random_tensor(shape, 30 + i as u64, -0.01, 0.01)).unwrap();
    }
    let mut opts = OptimStates::new(&models, &cfg).unwrap();
    let pairs = toy_pairs(2, 32);
    let batch = TrainBatch::from_pairs(&pairs).unwrap();
    let (before, _) = generator_objective(&models, &batch, &cfg).unwrap();
    let report = train_step(&mut models, &mut opts, &pairs, &cfg, 1e-4, 0, 0).unwrap();
    let (after, _) = generator_objective(&models, &batch, &cfg).unwrap();
    assert_eq!(report.g_total, before.total);
    assert!(after.total < before.total, "{} -> {}", before.total, after.total);
}

#[test]
fn resumed_run_matches_an_uninterrupted_one() {
    let cfg = TrainConfig { epochs: 3, steps_per_epoch: Some(1), ..tiny_cfg(Ablation::Full) };
    let data = toy_pairs(2, 48);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    Trainer::new(a.path(), PipelineConfig::tiny(), cfg.clone(), data.clone()).unwrap().train().unwrap();

    let mut first = Trainer::new(b.path(), PipelineConfig::tiny(), cfg.clone(), data.clone()).unwrap();
    first.run_epoch().unwrap();
    drop(first);
    let mut resumed = Trainer::resume(b.path(), data, None).unwrap();
    assert_eq!(resumed.epochs_completed, 1);
    assert_eq!(resumed.current_lr().unwrap(), lr_schedule(1, &cfg).unwrap());
    resumed.train().unwrap();

    let la = read_loss_log(&a.path().join(LOSS_LOG)).unwrap();
    let lb = read_loss_log(&b.path().join(LOSS_LOG)).unwrap();
    assert_eq!(la.len(), 3);
    assert_eq!(la, lb);
    for r in &la {
        assert_eq!(r.lr, lr_schedule(r.epoch, &cfg).unwrap());
    }
    assert!((la[1].lr / 1e-4 - 1.0).abs() < 0.01);
}
