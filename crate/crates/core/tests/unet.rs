mod common;

use std::collections::BTreeSet;

use common::{contract, uniform, uniform32, EPS, TOL};
use polyformer::metrics::argmax_masks;
use polyformer::nn::{module_grad_check, BnMode, ForwardCtx, Module, ParamKind, ParamSet};
use polyformer::tensor::{Graph, Tensor};
use polyformer::unet::UNet;
use polyformer::{Domain, SegModel, UNetConfig};

fn small() -> UNetConfig {
    UNetConfig {
        depth: 1,
        base_channels: 4,
        in_channels: 3,
        num_classes: 3,
    }
}

#[test]
fn logits_match_input_resolution() {
    let model = SegModel::<f32>::new(small(), 0).unwrap();
    let mut g = Graph::new();
    let x = g.input(uniform32(&[1, 3, 16, 16], 1, 1.0), false);
    let out = model
        .forward(&mut g, x, Domain::Source, &mut ForwardCtx::discarding())
        .unwrap();
    assert_eq!(g.shape(out.logits), &[1, 3, 16, 16]);
}

#[test]
fn default_features_are_full_resolution_with_base_width() {
    let model = SegModel::<f32>::new(UNetConfig::default(), 0).unwrap();
    assert_eq!(UNetConfig::default().feature_dim(), 8);
    let mut g = Graph::new();
    let x = g.input(uniform32(&[2, 3, 32, 32], 2, 1.0), false);
    let f = model
        .extract_features(&mut g, x, &mut ForwardCtx::discarding())
        .unwrap();
    assert_eq!(g.shape(f), &[2, 8, 32, 32]);
}

#[test]
fn same_seed_builds_identical_parameters() {
    let a = SegModel::<f32>::new(UNetConfig::default(), 7)
        .unwrap()
        .state();
    let b = SegModel::<f32>::new(UNetConfig::default(), 7)
        .unwrap()
        .state();
    let c = SegModel::<f32>::new(UNetConfig::default(), 8)
        .unwrap()
        .state();
    assert_eq!(a.len(), b.len());
    for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ta.bitwise_eq(tb), "{na}");
    }
    assert!(a
        .iter()
        .zip(&c)
        .any(|((_, ta), (_, tc))| !ta.bitwise_eq(tc)));
}

#[test]
fn parameter_names_are_unique() {
    let mut model = SegModel::<f32>::new(UNetConfig::default(), 0).unwrap();
    model.insert_polyformer(Default::default(), 0).unwrap();
    let names = model.param_names();
    let unique: BTreeSet<_> = names.iter().collect();
    assert_eq!(unique.len(), names.len());
    assert!(names.iter().all(|n| n.starts_with("backbone.")
        || n.starts_with("polyformer.")
        || n.starts_with("head.")));
}

#[test]
fn eval_mode_is_deterministic_and_batch_independent() {
    let mut model = SegModel::<f32>::new(UNetConfig::default(), 3).unwrap();
    model.set_backbone_bn_mode(BnMode::Eval);
    let x = uniform32(&[2, 3, 16, 16], 4, 1.0);
    let run = |x: &Tensor<f32>| {
        let mut g = Graph::inference();
        let v = g.input(x.clone(), false);
        let f = model
            .extract_features(&mut g, v, &mut ForwardCtx::discarding())
            .unwrap();
        g.value(f).clone()
    };
    let a = run(&x);
    assert!(a.bitwise_eq(&run(&x)));
    let first = Tensor::new([1, 3, 16, 16], x.data()[..3 * 256].to_vec()).unwrap();
    let one = run(&first);
    assert_eq!(&a.data()[..one.numel()], one.data());
}

#[test]
fn train_and_eval_differ_after_a_statistics_update() {
    let mut model = SegModel::<f32>::new(small(), 5).unwrap();
    let x = uniform32(&[2, 3, 8, 8], 6, 1.0).map(|v| 3.0 * v + 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone(), false);
    let mut ctx = ForwardCtx::recording();
    let train = model.extract_features(&mut g, xv, &mut ctx).unwrap();
    let train = g.value(train).clone();
    assert!(ctx.pending() > 0);
    ctx.apply(&mut model);
    model.set_backbone_bn_mode(BnMode::Eval);
    let mut g = Graph::new();
    let xv = g.input(x, false);
    let eval = model
        .extract_features(&mut g, xv, &mut ForwardCtx::recording())
        .unwrap();
    assert!(g.value(eval).max_abs_diff(&train) > 1e-3);
}

#[test]
fn split_model_equals_fused_forward() {
    let model = SegModel::<f32>::new(UNetConfig::default(), 9).unwrap();
    let x = uniform32(&[2, 3, 16, 16], 10, 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone(), false);
    let fused = model
        .forward(&mut g, xv, Domain::Source, &mut ForwardCtx::discarding())
        .unwrap();
    let fused = g.value(fused.logits).clone();
    let mut g = Graph::new();
    let xv = g.input(x, false);
    let f = model
        .extract_features(&mut g, xv, &mut ForwardCtx::discarding())
        .unwrap();
    let split = model.segment(&mut g, f).unwrap();
    assert!(g.value(split).bitwise_eq(&fused));
}

#[test]
fn segment_output_shape() {
    let model = SegModel::<f32>::new(UNetConfig::default(), 0).unwrap();
    let mut g = Graph::new();
    let f = g.input(uniform32(&[3, 8, 4, 5], 1, 1.0), false);
    let logits = model.segment(&mut g, f).unwrap();
    assert_eq!(g.shape(logits), &[3, 3, 4, 5]);
}

#[test]
fn argmax_breaks_ties_to_lowest_class_and_recovers_one_hot_masks() {
    let flat = Tensor::<f32>::full([1, 3, 2, 2], 0.25);
    assert_eq!(argmax_masks(&flat), vec![vec![0, 0, 0, 0]]);
    let mask = [2u8, 0, 1, 2];
    let logits = Tensor::<f32>::from_fn([1, 3, 2, 2], |i| {
        if mask[i % 4] as usize == i / 4 {
            50.0
        } else {
            0.0
        }
    });
    assert_eq!(argmax_masks(&logits), vec![mask.to_vec()]);
}

#[test]
fn rejects_bad_inputs_and_configs() {
    let model = SegModel::<f32>::new(UNetConfig::default(), 0).unwrap();
    let mut g = Graph::new();
    let odd = g.input(Tensor::zeros([1, 3, 10, 10]), false);
    assert!(model
        .extract_features(&mut g, odd, &mut ForwardCtx::discarding())
        .is_err());
    let gray = g.input(Tensor::zeros([1, 1, 8, 8]), false);
    assert!(model
        .extract_features(&mut g, gray, &mut ForwardCtx::discarding())
        .is_err());
    let bad = UNetConfig {
        depth: 0,
        ..UNetConfig::default()
    };
    assert!(SegModel::<f32>::new(bad, 0).is_err());
}

#[test]
fn grad_check_small_unet() {
    let cfg = UNetConfig {
        depth: 1,
        base_channels: 2,
        in_channels: 2,
        num_classes: 2,
    };
    let mut net = UNet::<f64>::new(cfg, 1).unwrap();
    net.visit_mut(&mut |p| {
        if p.kind != ParamKind::RunningStat {
            p.value = uniform(p.value.shape(), p.value.numel() as u64, 0.9);
        }
    });
    let all: ParamSet = net.param_names().into_iter().collect();
    net.set_trainable(&all);
    let err = module_grad_check(
        &net,
        &[uniform(&[2, 2, 4, 4], 3, 1.0)],
        |m, g, v| {
            let y = m.forward(g, v[0], &mut ForwardCtx::discarding())?;
            contract(g, y, 4)
        },
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}
