#![allow(dead_code)]

use polyformer::tensor::rng::RngKey;
use polyformer::tensor::{Graph, Tensor, Var};
use rand::Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Entries uniform in `(-scale, scale)`, keyed by `seed`.
pub fn uniform(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = RngKey::new(seed).rng();
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-scale..scale))
}

pub fn uniform32(shape: &[usize], seed: u64, scale: f64) -> Tensor<f32> {
    uniform(shape, seed, scale).cast()
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element matters.
pub fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> polyformer::Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = g.constant(uniform(&shape, seed, 1.0));
    let p = g.mul(y, r)?;
    Ok(g.sum_all(p))
}

use std::collections::BTreeMap;

use polyformer::adversarial::{adv_channels, adv_input, adv_loss, Discriminator};
use polyformer::loss::composite_loss;
use polyformer::nn::{
    module_grad_check, BatchNorm2d, BnMode, Conv2d, ConvBnRelu, FeedForward, ForwardCtx, LayerNorm,
    Linear, Module, ParamKind, ParamSet,
};
use polyformer::tensor::{grad_check, Real};
use polyformer::unet::UNet;
use polyformer::{
    AblationRow, AdvMode, Domain, PolyformerConfig, PolyformerLayer, SegModel, UNetConfig,
};

pub fn tiny_unet() -> UNetConfig {
    UNetConfig {
        depth: 1,
        base_channels: 4,
        in_channels: 3,
        num_classes: 3,
    }
}

/// Target-ready 64-bit model with Phase C standard trainability and a
/// discriminator for `mode`.
pub fn adversarial_pair(mode: AdvMode, lambda: f64) -> (SegModel<f64>, Discriminator<f64>) {
    let cfg = tiny_unet();
    let mut model = SegModel::<f64>::new(cfg, 1).unwrap();
    model
        .insert_polyformer(
            PolyformerConfig {
                dim: 4,
                prototypes: 3,
                modes: 2,
                ffn_hidden: 8,
            },
            2,
        )
        .unwrap();
    // A non-zero Transformer 2 projection so the whole layer carries gradient.
    model.visit_mut(&mut |p| {
        if p.name == "polyformer.t2.out" {
            p.value = uniform(p.value.shape(), 3, 0.5);
        }
    });
    let layer = model.polyformer_mut().unwrap();
    layer.mark_source_trained();
    layer.init_target_keys().unwrap();
    let set =
        polyformer::trainable_params(&model, polyformer::Phase::C, &AblationRow::Standard.flags())
            .unwrap();
    model.set_trainable(&set);
    let mut disc = Discriminator::new(
        adv_channels(mode, cfg.feature_dim(), cfg.num_classes),
        lambda,
        4,
    )
    .unwrap();
    let all = disc.param_names().into_iter().collect();
    disc.set_trainable(&all);
    (model, disc)
}

/// Parameter gradients of the adversarial loss on a fixed batch pair, with
/// or without the reversal layer.
pub fn adversarial_grads(
    model: &SegModel<f64>,
    disc: &Discriminator<f64>,
    mode: AdvMode,
    bypass: bool,
) -> BTreeMap<String, Tensor<f64>> {
    let mut g = Graph::new();
    let xs = g.input(
        uniform(&[2, 3, 16, 16], 10, 1.0).map(|v| 0.5 + 0.5 * v),
        false,
    );
    let xt = g.input(
        uniform(&[2, 3, 16, 16], 11, 1.0).map(|v| 0.3 + 0.4 * v),
        false,
    );
    let mut ctx = ForwardCtx::recording();
    let out_s = model
        .forward(&mut g, xs, Domain::Source, &mut ForwardCtx::discarding())
        .unwrap();
    let out_t = model.forward(&mut g, xt, Domain::Target, &mut ctx).unwrap();
    let a_s = adv_input(&mut g, &out_s, mode).unwrap();
    let a_t = adv_input(&mut g, &out_t, mode).unwrap();
    let loss = adv_loss(&mut g, disc, Some(a_s), Some(a_t), &mut ctx, bypass).unwrap();
    g.backward(loss).unwrap();
    g.param_grads()
}

/// Largest relative deviation of generator gradients from `−λ` times the
/// bypassed gradients, and of discriminator gradients from equality.
/// Also returns how many generator parameters were compared.
pub fn grl_deviation(mode: AdvMode, lambda: f64) -> (f64, f64, usize) {
    let (model, disc) = adversarial_pair(mode, lambda);
    let with = adversarial_grads(&model, &disc, mode, false);
    let without = adversarial_grads(&model, &disc, mode, true);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
    let (mut gen, mut dis, mut count) = (0.0f64, 0.0f64, 0);
    for (name, gw) in &with {
        let gb = &without[name];
        let is_disc = name.starts_with("disc.");
        count += !is_disc as usize;
        for (&a, &b) in gw.data().iter().zip(gb.data()) {
            if is_disc {
                dis = dis.max(rel(a, b));
            } else {
                gen = gen.max(rel(a, -lambda * b));
            }
        }
    }
    (gen, dis, count)
}

/// Overwrites every parameter with a deterministic pattern.
pub fn hand_set<T: Real>(layer: &mut PolyformerLayer<T>, salt: f64) {
    let mut k = 0.0;
    layer.visit_mut(&mut |p| {
        k += 1.0;
        let base = k;
        p.value = Tensor::from_fn(p.value.shape().to_vec(), |i| {
            T::lit(0.8 * (1.3 * i as f64 + 0.7 * base + salt).sin())
        });
    });
}

/// Worst deviation from 1 of the Transformer 1 attention column sums (over
/// N) and of the Transformer 2 row sums (over M) for `n` random tokens and
/// `m` prototypes. Panics unless every attention map is `[2, n, m]`.
pub fn attention_sums(n: usize, m: usize, seed: u64) -> (f64, f64) {
    let cfg = PolyformerConfig {
        dim: 8,
        prototypes: m,
        modes: 2,
        ffn_hidden: 16,
    };
    let mut layer = PolyformerLayer::<f32>::new(cfg, seed).unwrap();
    hand_set(&mut layer, seed as f64);
    let mut g = Graph::new();
    let f = g.input(uniform32(&[2, n, 8], seed + 1, 2.0), false);
    let sq = layer.squeeze(&mut g, f, Domain::Source).unwrap();
    let ex = layer.expand(&mut g, sq.prototypes, f).unwrap();
    let (mut worst1, mut worst2) = (0.0f64, 0.0f64);
    for a in &sq.attention {
        let a = g.value(*a);
        assert_eq!(a.shape(), &[2, n, m]);
        for b in 0..2 {
            for j in 0..m {
                let s: f64 = (0..n).map(|i| a.at(&[b, i, j]) as f64).sum();
                worst1 = worst1.max((s - 1.0).abs());
            }
        }
    }
    for a in &ex.attention {
        let a = g.value(*a);
        assert_eq!(a.shape(), &[2, n, m]);
        for b in 0..2 {
            for i in 0..n {
                let s: f64 = (0..m).map(|j| a.at(&[b, i, j]) as f64).sum();
                worst2 = worst2.max((s - 1.0).abs());
            }
        }
    }
    (worst1, worst2)
}

/// Unwraps the tensor error inside a crate error, for closures handed to
/// `grad_check`.
pub fn tensor_error(e: polyformer::Error) -> polyformer::tensor::TensorError {
    match e {
        polyformer::Error::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

fn all_trainable<M: Module<f64>>(mut m: M, seed: u64) -> M {
    m.visit_mut(&mut |p| {
        if p.kind != ParamKind::RunningStat {
            p.value = uniform(p.value.shape(), seed ^ p.value.numel() as u64, 0.8);
        }
    });
    let all: ParamSet = m.param_names().into_iter().collect();
    m.set_trainable(&all);
    m
}

/// Worst relative gradient error of every layer type, inputs and trainable
/// parameters alike, in 64-bit central differences.
pub fn grad_check_suite() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    let mut run = |name: &'static str, err: polyformer::Result<f64>| out.push((name, err.unwrap()));

    for (name, stride, bias) in [("conv2d stride 1", 1, true), ("conv2d stride 2", 2, false)] {
        let conv = all_trainable(Conv2d::<f64>::new("c", 2, 3, 3, stride, bias, 4), 1);
        run(
            name,
            module_grad_check(
                &conv,
                &[uniform(&[2, 2, 5, 5], 2, 1.0)],
                |m, g, v| {
                    let y = m.forward(g, v[0])?;
                    contract(g, y, 3)
                },
                EPS,
            ),
        );
    }
    let bn = all_trainable(BatchNorm2d::<f64>::new("bn", 3), 2);
    run(
        "batchnorm (train)",
        module_grad_check(
            &bn,
            &[uniform(&[2, 3, 3, 3], 5, 2.0)],
            |m, g, v| {
                let y = m.forward(g, v[0], &mut ForwardCtx::discarding())?;
                contract(g, y, 6)
            },
            EPS,
        ),
    );
    let block = all_trainable(ConvBnRelu::<f64>::new("b", 2, 3, 1, 9), 3);
    run(
        "conv-bn-relu",
        module_grad_check(
            &block,
            &[uniform(&[2, 2, 4, 4], 7, 1.0)],
            |m, g, v| {
                let y = m.forward(g, v[0], &mut ForwardCtx::discarding())?;
                contract(g, y, 8)
            },
            EPS,
        ),
    );
    let lin = all_trainable(Linear::<f64>::new("l", 4, 3, 1), 4);
    run(
        "linear",
        module_grad_check(
            &lin,
            &[uniform(&[2, 5, 4], 10, 1.0)],
            |m, g, v| {
                let y = m.forward(g, v[0])?;
                contract(g, y, 9)
            },
            EPS,
        ),
    );
    let ln = all_trainable(LayerNorm::<f64>::new("n", 6), 5);
    run(
        "layer norm",
        module_grad_check(
            &ln,
            &[uniform(&[4, 6], 12, 2.0)],
            |m, g, v| {
                let y = m.forward(g, v[0])?;
                contract(g, y, 11)
            },
            EPS,
        ),
    );
    let ffn = all_trainable(FeedForward::<f64>::new("f", 4, 8, 2), 6);
    run(
        "feed-forward (gelu)",
        module_grad_check(
            &ffn,
            &[uniform(&[3, 4], 14, 1.5)],
            |m, g, v| {
                let y = m.forward(g, v[0])?;
                contract(g, y, 13)
            },
            EPS,
        ),
    );
    run(
        "gradient reversal (stacked, λ = 1)",
        grad_check(
            |g, v| {
                let y = g.grad_reverse(v[0], 1.0)?;
                let y = g.grad_reverse(y, 1.0)?;
                let r = g.constant(uniform(&[5], 8, 1.0));
                let p = g.mul(y, r)?;
                Ok(g.sum_all(p))
            },
            &[uniform(&[5], 2, 1.0)],
            EPS,
        )
        .map_err(Into::into),
    );
    let unet_cfg = UNetConfig {
        depth: 1,
        base_channels: 2,
        in_channels: 2,
        num_classes: 2,
    };
    let net = all_trainable(UNet::<f64>::new(unet_cfg, 1).unwrap(), 7);
    run(
        "u-net",
        module_grad_check(
            &net,
            &[uniform(&[2, 2, 4, 4], 3, 1.0)],
            |m, g, v| {
                let y = m.forward(g, v[0], &mut ForwardCtx::discarding())?;
                contract(g, y, 4)
            },
            EPS,
        ),
    );
    let mut disc = Discriminator::<f64>::new(2, 1.0, 5).unwrap();
    disc.set_bn_mode(BnMode::Eval);
    run(
        "discriminator (input, grl bypassed)",
        grad_check(
            |g, v| {
                let y = disc
                    .forward(g, v[0], &mut ForwardCtx::discarding(), true)
                    .map_err(tensor_error)?;
                contract(g, y, 15).map_err(tensor_error)
            },
            &[uniform(&[2, 2, 16, 16], 16, 1.0)],
            EPS,
        )
        .map_err(Into::into),
    );
    let mask: Vec<usize> = (0..2 * 12).map(|i| (i * 7 / 3) % 3).collect();
    run(
        "composite loss",
        grad_check(
            |g, v| {
                composite_loss(g, v[0], &mask)
                    .map(|l| l.total)
                    .map_err(tensor_error)
            },
            &[uniform(&[2, 3, 3, 4], 5, 2.0)],
            EPS,
        )
        .map_err(Into::into),
    );
    run(
        "polyformer layer (N=12, M=4, D=8, 2 modes)",
        full_layer_grad_check(),
    );
    out
}

/// The whole polyformer layer, every parameter trainable, on 12 tokens
/// arranged as a 3×4 map.
pub fn full_layer_grad_check() -> polyformer::Result<f64> {
    let cfg = PolyformerConfig {
        dim: 8,
        prototypes: 4,
        modes: 2,
        ffn_hidden: 16,
    };
    let mut layer = PolyformerLayer::<f64>::new(cfg, 9).unwrap();
    hand_set(&mut layer, 0.9);
    let all: ParamSet = layer.param_names().into_iter().collect();
    layer.set_trainable(&all);
    module_grad_check(
        &layer,
        &[uniform(&[1, 8, 3, 4], 10, 1.0)],
        |m, g, v| {
            let out = m.forward(g, v[0], Domain::Source)?;
            contract(g, out.features, 11)
        },
        EPS,
    )
}
