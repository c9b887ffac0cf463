mod common;

use common::{contract, uniform, EPS, TOL};
use polyformer::nn::{
    module_grad_check, BatchNorm2d, BnMode, Conv2d, ConvBnRelu, FeedForward, ForwardCtx,
    GradientReversal, LayerNorm, Linear, Module, Param, ParamKind, ParamSet,
};
use polyformer::optim::{AdamW, AdamWConfig};
use polyformer::tensor::{grad_check, Graph, Tensor};
use polyformer::Error;

fn randomise<M: Module<f64>>(m: &mut M, seed: u64) {
    m.visit_mut(&mut |p| {
        if p.kind != ParamKind::RunningStat {
            p.value = uniform(p.value.shape(), seed ^ p.value.numel() as u64, 0.8);
        }
    });
}

// ---------------------------------------------------------------- BatchNorm

#[test]
fn batchnorm_eval_with_unit_stats_is_identity() {
    let mut bn = BatchNorm2d::<f64>::new("bn", 3);
    bn.mode = BnMode::Eval;
    // The output is exactly x/√(1 + eps), within 1e-6 of x for |x| < 0.2.
    let x = uniform(&[2, 3, 4, 4], 1, 0.19);
    let mut g = Graph::new();
    let xv = g.input(x.clone(), false);
    let y = bn
        .forward(&mut g, xv, &mut ForwardCtx::recording())
        .unwrap();
    assert!(g.value(y).max_abs_diff(&x) <= 1e-6);
    let scaled = x.map(|v| v / (1.0 + polyformer::nn::BN_EPS).sqrt());
    assert!(g.value(y).max_abs_diff(&scaled) <= 1e-15);
}

#[test]
fn batchnorm_train_normalises_each_channel() {
    let bn = BatchNorm2d::<f64>::new("bn", 3);
    let x = Tensor::from_fn([4, 3, 5, 5], |i| {
        uniform(&[1], i as u64, 2.0).data()[0] + (i % 7) as f64
    });
    let mut g = Graph::new();
    let xv = g.input(x, false);
    let y = bn
        .forward(&mut g, xv, &mut ForwardCtx::recording())
        .unwrap();
    let y = g.value(y);
    for c in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|b| (0..25).map(move |i| (b, i)))
            .map(|(b, i)| y.data()[(b * 3 + c) * 25 + i])
            .collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-5, "channel {c} mean {mean}");
        assert!((var - 1.0).abs() <= 1e-4, "channel {c} var {var}");
    }
}

/// One forward/backward/optimizer step; returns (stats recorded, gamma got
/// gradient, parameters before, parameters after).
fn bn_probe(mode: BnMode) -> (bool, bool, BatchNorm2d<f64>, BatchNorm2d<f64>) {
    let mut bn = BatchNorm2d::<f64>::new("bn", 2);
    bn.mode = mode;
    bn.set_trainable(&bn.param_names().into_iter().collect());
    let before = bn.clone();
    let mut g = Graph::new();
    let x = g.input(uniform(&[3, 2, 3, 3], 5, 2.0), false);
    let mut ctx = ForwardCtx::recording();
    let y = bn.forward(&mut g, x, &mut ctx).unwrap();
    let loss = contract(&mut g, y, 6).unwrap();
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    let mut opt = AdamW::new(AdamWConfig::default());
    opt.begin_step();
    opt.apply(&mut bn, &grads).unwrap();
    ctx.apply(&mut bn);
    (
        ctx.pending() > 0,
        grads.contains_key("bn.gamma"),
        before,
        bn,
    )
}

#[test]
fn batchnorm_mode_table() {
    let table = [
        (BnMode::Train, true, true),
        (BnMode::Eval, false, false),
        (BnMode::StatsOnly, true, false),
    ];
    for (mode, stats, affine) in table {
        let (recorded, grad, before, after) = bn_probe(mode);
        assert_eq!(recorded, stats, "{mode:?} stats");
        assert_eq!(grad, affine, "{mode:?} affine");
        let moved = !after
            .running_mean
            .value
            .bitwise_eq(&before.running_mean.value);
        assert_eq!(moved, stats, "{mode:?} running mean moved");
        let gamma_moved = !after.gamma.value.bitwise_eq(&before.gamma.value);
        assert_eq!(gamma_moved, affine, "{mode:?} gamma moved");
        assert!(after.running_var.value.data().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn batchnorm_stats_only_keeps_affine_bitwise() {
    let (_, _, before, after) = bn_probe(BnMode::StatsOnly);
    assert!(after.gamma.value.bitwise_eq(&before.gamma.value));
    assert!(after.beta.value.bitwise_eq(&before.beta.value));
    assert!(!after
        .running_mean
        .value
        .bitwise_eq(&before.running_mean.value));
}

#[test]
fn batchnorm_running_stats_follow_momentum() {
    let bn = BatchNorm2d::<f64>::new("bn", 1);
    let x = Tensor::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap();
    let mut g = Graph::new();
    let xv = g.input(x, false);
    let mut ctx = ForwardCtx::recording();
    bn.forward(&mut g, xv, &mut ctx).unwrap();
    let mut after = bn.clone();
    ctx.apply(&mut after);
    // mean 3, unbiased variance 14/3
    assert!((after.running_mean.value.data()[0] - 0.3).abs() < 1e-12);
    assert!((after.running_var.value.data()[0] - (0.9 + 0.1 * 14.0 / 3.0)).abs() < 1e-12);
}

#[test]
fn discarding_context_records_nothing() {
    let bn = BatchNorm2d::<f64>::new("bn", 2);
    let mut g = Graph::new();
    let x = g.input(uniform(&[2, 2, 2, 2], 3, 1.0), false);
    let mut ctx = ForwardCtx::discarding();
    bn.forward(&mut g, x, &mut ctx).unwrap();
    assert_eq!(ctx.pending(), 0);
}

// ---------------------------------------------------------------- GRL

#[test]
fn grl_examples() {
    let grl = GradientReversal::new(1.0).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_f64([2], &[1.5, -2.0]).unwrap(), true);
    let y = grl.forward(&mut g, x).unwrap();
    assert_eq!(g.value(y).data(), &[1.5, -2.0]);
    let up = g.constant(Tensor::from_f64([2], &[0.25, 3.0]).unwrap());
    let p = g.mul(y, up).unwrap();
    let l = g.sum_all(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[-0.25, -3.0]);

    let grl = GradientReversal::new(0.5).unwrap();
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::zeros([2]), true);
    let y = grl.forward(&mut g, x).unwrap();
    let up = g.constant(Tensor::from_f64([2], &[2.0, -4.0]).unwrap());
    let p = g.mul(y, up).unwrap();
    let l = g.sum_all(p);
    g.backward(l).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[-1.0, 2.0]);
}

#[test]
fn grl_rejects_negative_or_nan_scale() {
    assert!(matches!(GradientReversal::new(-0.1), Err(Error::Config(_))));
    assert!(matches!(
        GradientReversal::new(f64::NAN),
        Err(Error::Config(_))
    ));
    assert!(GradientReversal::new(0.0).is_ok());
}

#[test]
fn double_reversal_scales_by_lambda_squared() {
    let lambda = 0.7;
    let grl = GradientReversal::new(lambda).unwrap();
    let x0 = uniform(&[5], 2, 1.0);
    let mut g = Graph::<f64>::new();
    let x = g.input(x0.clone(), true);
    let y = grl.forward(&mut g, x).unwrap();
    let y = grl.forward(&mut g, y).unwrap();
    let l = contract(&mut g, y, 8).unwrap();
    g.backward(l).unwrap();
    let r = uniform(&[5], 8, 1.0);
    for (gx, ri) in g.grad(x).unwrap().data().iter().zip(r.data()) {
        assert!((gx - lambda * lambda * ri).abs() < 1e-12);
    }
    // At λ = 1 two reversals restore the true gradient of the identity, so
    // finite differences apply.
    let err = grad_check(
        |g, v| {
            let y = g.grad_reverse(v[0], 1.0)?;
            let y = g.grad_reverse(y, 1.0)?;
            let r = g.constant(uniform(&[5], 8, 1.0));
            let p = g.mul(y, r)?;
            Ok(g.sum_all(p))
        },
        &[x0],
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

// ---------------------------------------------------------------- FFN

fn gelu_oracle(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn ffn_matches_two_matmul_oracle() {
    let (d, h, rows) = (4, 8, 5);
    let mut ffn = FeedForward::<f64>::new("ffn", d, h, 3);
    randomise(&mut ffn, 11);
    let x = uniform(&[rows, d], 12, 2.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone(), false);
    let y = ffn.forward(&mut g, xv).unwrap();
    let y = g.value(y);
    let (w1, b1) = (&ffn.fc1.weight.value, &ffn.fc1.bias.value);
    let (w2, b2) = (&ffn.fc2.weight.value, &ffn.fc2.bias.value);
    for r in 0..rows {
        let hidden: Vec<f64> = (0..h)
            .map(|j| {
                gelu_oracle(
                    b1.data()[j] + (0..d).map(|i| x.at(&[r, i]) * w1.at(&[i, j])).sum::<f64>(),
                )
            })
            .collect();
        for k in 0..d {
            let want = b2.data()[k] + (0..h).map(|j| hidden[j] * w2.at(&[j, k])).sum::<f64>();
            assert!((y.at(&[r, k]) - want).abs() <= 1e-6, "row {r} col {k}");
        }
    }
}

#[test]
fn ffn_zero_output_layer_gives_zeros_and_keeps_shape() {
    let mut ffn = FeedForward::<f64>::new("ffn", 8, 16, 1);
    ffn.fc2 = Linear::zeroed("ffn.fc2", 16, 8);
    let mut g = Graph::new();
    let x = g.input(uniform(&[7, 8], 4, 1.0), false);
    let y = ffn.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[7, 8]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn linear_rejects_wrong_width() {
    let lin = Linear::<f64>::new("l", 3, 2, 0);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([4, 5]), false);
    assert!(lin.forward(&mut g, x).is_err());
}

// ---------------------------------------------------------------- gradient checks

fn trainable<M: Module<f64>>(mut m: M) -> M {
    let all: ParamSet = m.param_names().into_iter().collect();
    m.set_trainable(&all);
    m
}

#[test]
fn grad_check_conv2d() {
    for (stride, bias) in [(1, true), (2, false)] {
        let mut conv = trainable(Conv2d::<f64>::new("c", 2, 3, 3, stride, bias, 4));
        randomise(&mut conv, 1);
        let err = module_grad_check(
            &conv,
            &[uniform(&[2, 2, 5, 5], 2, 1.0)],
            |m, g, v| {
                let y = m.forward(g, v[0])?;
                contract(g, y, 3)
            },
            EPS,
        )
        .unwrap();
        assert!(err <= TOL, "stride {stride}: {err}");
    }
}

#[test]
fn grad_check_batchnorm_train() {
    let mut bn = trainable(BatchNorm2d::<f64>::new("bn", 3));
    randomise(&mut bn, 2);
    let err = module_grad_check(
        &bn,
        &[uniform(&[2, 3, 3, 3], 5, 2.0)],
        |m, g, v| {
            let y = m.forward(g, v[0], &mut ForwardCtx::discarding())?;
            contract(g, y, 6)
        },
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn grad_check_conv_bn_relu() {
    let mut block = trainable(ConvBnRelu::<f64>::new("b", 2, 3, 1, 9));
    randomise(&mut block, 3);
    let err = module_grad_check(
        &block,
        &[uniform(&[2, 2, 4, 4], 7, 1.0)],
        |m, g, v| {
            let y = m.forward(g, v[0], &mut ForwardCtx::discarding())?;
            contract(g, y, 8)
        },
        EPS,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn grad_check_linear_layernorm_ffn() {
    let mut lin = trainable(Linear::<f64>::new("l", 4, 3, 1));
    randomise(&mut lin, 4);
    let f = |m: &Linear<f64>, g: &mut Graph<f64>, v: &[polyformer::tensor::Var]| {
        let y = m.forward(g, v[0])?;
        contract(g, y, 9)
    };
    let err = module_grad_check(&lin, &[uniform(&[2, 5, 4], 10, 1.0)], f, EPS).unwrap();
    assert!(err <= TOL, "linear {err}");

    let mut ln = trainable(LayerNorm::<f64>::new("n", 6));
    randomise(&mut ln, 5);
    let f = |m: &LayerNorm<f64>, g: &mut Graph<f64>, v: &[polyformer::tensor::Var]| {
        let y = m.forward(g, v[0])?;
        contract(g, y, 11)
    };
    let err = module_grad_check(&ln, &[uniform(&[4, 6], 12, 2.0)], f, EPS).unwrap();
    assert!(err <= TOL, "layer norm {err}");

    let mut ffn = trainable(FeedForward::<f64>::new("f", 4, 8, 2));
    randomise(&mut ffn, 6);
    let f = |m: &FeedForward<f64>, g: &mut Graph<f64>, v: &[polyformer::tensor::Var]| {
        let y = m.forward(g, v[0])?;
        contract(g, y, 13)
    };
    let err = module_grad_check(&ffn, &[uniform(&[3, 4], 14, 1.5)], f, EPS).unwrap();
    assert!(err <= TOL, "ffn {err}");
}

// ---------------------------------------------------------------- parameter plumbing

#[test]
fn running_stats_are_never_trainable() {
    let mut bn = BatchNorm2d::<f32>::new("bn", 2);
    bn.set_trainable(&bn.param_names().into_iter().collect());
    let t = bn.trainable_names();
    assert!(t.contains("bn.gamma") && t.contains("bn.beta"));
    assert!(!t.contains("bn.running_mean") && !t.contains("bn.running_var"));
}

#[test]
fn load_state_reports_every_mismatch() {
    let mut lin = Linear::<f32>::new("l", 3, 2, 0);
    let before = lin.state();
    let bad = vec![
        ("l.weights".to_string(), Tensor::zeros([3, 2])),
        ("l.bias".to_string(), Tensor::zeros([5])),
    ];
    let err = lin.load_state(&bad).unwrap_err().to_string();
    assert!(err.contains("missing l.weight"), "{err}");
    assert!(err.contains("unexpected l.weights"), "{err}");
    assert!(err.contains("shape of l.bias"), "{err}");
    assert_eq!(lin.state(), before);
}

#[test]
fn only_weight_matrices_decay() {
    let w = Param::new("w", Tensor::<f32>::zeros([1]), ParamKind::Weight);
    assert!(w.decays());
    for kind in [
        ParamKind::Bias,
        ParamKind::NormAffine,
        ParamKind::Prototype,
        ParamKind::Gate,
    ] {
        assert!(
            !Param::new("p", Tensor::<f32>::zeros([1]), kind).decays(),
            "{kind:?}"
        );
    }
    assert!(!Param::new("r", Tensor::<f32>::zeros([1]), ParamKind::RunningStat).trainable);
}
