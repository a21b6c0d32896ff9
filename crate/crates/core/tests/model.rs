//! End-to-end model behaviour: shapes, gradients, invariances, checkpoints.

mod common;

use common::*;
use p2sc_core::backbone::Backbone;
use p2sc_core::checkpoint::Checkpoint;
use p2sc_core::config::{Ablation, ModelConfig, SegmentationConfig};
use p2sc_core::data::{generate_synthetic, half_space_parts, ShapeFamily, SyntheticSpec};
use p2sc_core::model::{CapsuleChoice, Model};
use p2sc_core::nn::{Forward, ParamStore};
use p2sc_core::par::Execution;
use p2sc_core::points::PointCloud;
use p2sc_core::train::{prepare_samples, Trainer};

fn shape(family: ShapeFamily, n: usize, seed: u64) -> PointCloud {
    let spec = SyntheticSpec { family, points_per_cloud: n, jitter_sigma: 0.01, seed };
    generate_synthetic(&spec, 1).unwrap().remove(0).normalized()
}

fn permuted(cloud: &PointCloud, seed: u64) -> PointCloud {
    cloud.select(&permutation(&mut rng(seed), cloud.len())).unwrap()
}

#[test]
fn paper_preset_backbone_shape() {
    let cfg = ModelConfig::paper(40);
    assert_eq!(cfg.primary_capsules(), 1024);
    assert_eq!(cfg.capsule_dim, 16);
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &mut rng(0), &cfg.backbone, false).unwrap();
    let mut f = Forward::new(&store, true);
    let out = backbone.forward(&mut f, &shape(ShapeFamily::Torus, 1024, 1)).unwrap();
    assert_eq!(f.g.shape(out.layer2.features), &[256, 4, 128]);
}

#[test]
fn backbone_ignores_point_order() {
    let cfg = ModelConfig::toy(4);
    let mut store = ParamStore::new();
    let backbone = Backbone::new(&mut store, &mut rng(1), &cfg.backbone, false).unwrap();
    let cloud = shape(ShapeFamily::Cube, 256, 2);
    let run = |c: &PointCloud| {
        let mut f = Forward::new(&store, true);
        let out = backbone.forward(&mut f, c).unwrap();
        f.g.value(out.layer2.features).to_vec()
    };
    let base = run(&cloud);
    for seed in 0..3 {
        assert!(max_abs_diff(&base, &run(&permuted(&cloud, seed))) <= 1e-9);
    }
}

#[test]
fn every_parameter_group_receives_gradient() {
    let model = Model::new(ModelConfig::toy(4)).unwrap();
    let x = model.prepare(&shape(ShapeFamily::Torus, 256, 3)).unwrap();
    let grads = model.sample_gradients(&x, 2).unwrap().grads;
    for prefix in ["backbone.0", "backbone.1", "cluster", "primary", "routing.w", "routing.log_priors", "decoder"] {
        let norm: f64 = model
            .params
            .ids()
            .filter(|&id| model.params.name(id).starts_with(prefix))
            .map(|id| grads.norm(id).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(norm > 0.0, "{prefix} has zero gradient");
    }
}

#[test]
fn full_toy_loss_matches_finite_differences() {
    let model = Model::new(ModelConfig::toy(4)).unwrap();
    let x = model.prepare(&shape(ShapeFamily::Sphere, 256, 4)).unwrap();
    let (err, at) = model_grad_check(&model, &x, 0, 2, 1e-5);
    assert!(err <= 1e-4, "worst {err:e} at {at}");
}

#[test]
fn capsule_lengths_ignore_point_order() {
    let model = Model::new(ModelConfig::toy(4)).unwrap();
    for (k, family) in TOY_FAMILIES.iter().enumerate() {
        let cloud = shape(*family, 256, 10 + k as u64);
        let base = model.predict(&cloud).unwrap();
        for seed in 0..3 {
            let p = model.predict(&permuted(&cloud, seed)).unwrap();
            assert_eq!(p.class, base.class);
            for (a, b) in p.lengths.iter().zip(&base.lengths) {
                assert!(rel_diff(*a, *b) <= 1e-4);
            }
        }
    }
}

#[test]
fn ablated_models_train_one_step() {
    let (train, _) = toy_split(5, 256, 3);
    for variant in [Ablation::NoMulti, Ablation::NoVlad, Ablation::NoCaps] {
        let mut cfg = ModelConfig::toy(4).ablation(variant).unwrap();
        cfg.optimizer.batch_size = 8;
        let model = Model::new(cfg).unwrap();
        let samples = prepare_samples(&model, &train, Execution::Sequential).unwrap();
        let mut trainer = Trainer::new(model, Execution::Sequential);
        let m = trainer.train_epoch(&samples[..8]).unwrap();
        assert!(m.loss.is_finite() && m.loss > 0.0, "{variant:?}");
    }
    let with_seg = ModelConfig { segmentation: Some(SegmentationConfig::default()), ..ModelConfig::toy(4) };
    assert!(Model::new(with_seg.ablation(Ablation::NoCaps).unwrap()).is_err());
}

#[test]
fn segmentation_logits_follow_point_order() {
    let cfg = ModelConfig { segmentation: Some(SegmentationConfig::default()), ..ModelConfig::toy(1) };
    let model = Model::new(cfg).unwrap();
    let cloud = half_space_parts(&shape(ShapeFamily::Plane, 256, 5)).unwrap();
    let perm = permutation(&mut rng(6), cloud.len());
    let logits = model.segment(&model.prepare(&cloud).unwrap(), CapsuleChoice::Predicted).unwrap();
    let moved = model.segment(&model.prepare(&cloud.select(&perm).unwrap()).unwrap(), CapsuleChoice::Predicted).unwrap();
    assert_eq!(logits.len(), 256 * 2);
    for (new, &old) in perm.iter().enumerate() {
        for p in 0..2 {
            assert!((moved[new * 2 + p] - logits[old * 2 + p]).abs() <= 1e-9);
        }
    }
    let x = model.prepare(&cloud).unwrap();
    let g = model.sample_gradients(&x, 0).unwrap();
    assert!(g.report.segmentation.unwrap() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let model = Model::new(ModelConfig::toy(4)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.p2sc");
    Checkpoint::from_model(&model, 0, 0, None).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    let cloud = shape(ShapeFamily::Cube, 256, 7);
    let (a, b) = (model.predict(&cloud).unwrap(), back.predict(&cloud).unwrap());
    assert_eq!(a.lengths, b.lengths);
    assert_eq!(a.digits, b.digits);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (train, _) = toy_split(8, 256, 4);
    let mut cfg = ModelConfig::toy(4);
    cfg.optimizer.epochs = 2;
    let model = Model::new(cfg).unwrap();
    let samples = prepare_samples(&model, &train, Execution::available()).unwrap();

    let mut straight = Trainer::new(model.clone(), Execution::available());
    straight.train_epoch(&samples).unwrap();
    let expect = straight.train_epoch(&samples).unwrap();

    let mut first = Trainer::new(model, Execution::available());
    first.train_epoch(&samples).unwrap();
    let bytes = first.checkpoint().to_bytes().unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::from_bytes(&bytes).unwrap(), Execution::Sequential).unwrap();
    let got = resumed.train_epoch(&samples).unwrap();
    assert!(rel_diff(got.loss, expect.loss) <= 1e-6, "{} vs {}", got.loss, expect.loss);
    assert_eq!(resumed.model.params, straight.model.params);
}
