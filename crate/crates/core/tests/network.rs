mod common;

use common::{randn, uniform};
use mdda::network::{build_model, count_flops, CountConvention, Model, ModelConfig, StageKind, STAGE_NAMES};
use mdda::nn::{ConvSpec, Ctx};
use mdda::tensor::{Tape, Tensor, Var};
use mdda::Error;

fn random_weights(m: &mut Model<f64>, seed: u64) {
    let ids: Vec<_> = m.params().ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = m.params().get(id).shape().to_vec();
        let base = m.params().get(id).clone();
        let noise = randn(&shape, seed + i as u64);
        let v = Tensor::new(&shape, base.data().iter().zip(noise.data()).map(|(b, n)| b + 0.1 * n).collect()).unwrap();
        m.params_mut().set(id, v).unwrap();
    }
}

/// Stage-by-stage trace written out level by level from the block modules.
fn traced_forward(m: &Model<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let a = m.arch();
    let mut tape = Tape::inference();
    let mut ctx = Ctx::bind(&mut tape, m.params());
    let ctx = &mut ctx;
    let stack = |ctx: &mut Ctx<'_, f64>, slot: usize, mut f: Var<f64>| {
        for b in &a.stages[slot] {
            f = b.forward(ctx, &f).unwrap();
        }
        f
    };
    let xv = Var::constant(x.clone());
    let f0 = a.embed.forward(ctx, &xv).unwrap();
    let f0 = ctx.tape().relu(&f0).unwrap();
    let e1 = stack(ctx, 0, f0);
    let d1 = a.down[0].forward(ctx, &e1).unwrap();
    let e2 = stack(ctx, 1, d1);
    let d2 = a.down[1].forward(ctx, &e2).unwrap();
    let e3 = stack(ctx, 2, d2);
    let d3 = a.down[2].forward(ctx, &e3).unwrap();
    let lat = stack(ctx, 3, d3);

    let u3 = a.up[2].forward(ctx, &lat).unwrap();
    let c3 = ctx.tape().concat_channels(&[&u3, &e3]).unwrap();
    let r3 = a.reduce[2].as_ref().unwrap().forward(ctx, &c3).unwrap();
    let g3 = stack(ctx, 4, r3);
    let u2 = a.up[1].forward(ctx, &g3).unwrap();
    let c2 = ctx.tape().concat_channels(&[&u2, &e2]).unwrap();
    let r2 = a.reduce[1].as_ref().unwrap().forward(ctx, &c2).unwrap();
    let g2 = stack(ctx, 5, r2);
    let u1 = a.up[0].forward(ctx, &g2).unwrap();
    let c1 = ctx.tape().concat_channels(&[&u1, &e1]).unwrap();
    let g1 = stack(ctx, 6, c1);

    let t = a.tail[0].forward(ctx, &g1).unwrap();
    let t = a.tail[1].forward(ctx, &t).unwrap();
    ctx.tape().add(&xv, &t).unwrap().to_tensor()
}

#[test]
fn tiny_forward_matches_stage_trace() {
    let mut m = build_model(&ModelConfig::tiny(), 5).unwrap().cast::<f64>();
    random_weights(&mut m, 100);
    let x = uniform(&[1, 3, 16, 16], 0.0, 1.0, 6);
    let y = m.restore(&x).unwrap();
    let want = traced_forward(&m, &x);
    assert!(y.max_abs_diff(&want) < 1e-5, "{}", y.max_abs_diff(&want));
    assert!(y.max_abs_diff(&x) > 1e-3, "trace must exercise the network, not just the residual");
}

#[test]
fn shapes_and_padding() {
    let m = build_model(&ModelConfig::tiny(), 1).unwrap();
    for (h, w) in [(64, 64), (70, 66), (9, 13)] {
        let x = uniform(&[1, 3, h, w], 0.0, 1.0, 7).cast::<f32>();
        assert_eq!(m.restore(&x).unwrap().shape(), &[1, 3, h, w]);
    }
}

#[test]
fn padded_path_is_plain_forward_on_multiples_of_eight() {
    let m = build_model(&ModelConfig::tiny(), 2).unwrap();
    let x = uniform(&[1, 3, 16, 24], 0.0, 1.0, 8).cast::<f32>();
    let mut tape = Tape::inference();
    let mut ctx = Ctx::bind(&mut tape, m.params());
    let plain = m.forward(&mut ctx, &Var::constant(x.clone())).unwrap().to_tensor();
    assert_eq!(m.restore(&x).unwrap(), plain);

    let mut tape = Tape::inference();
    let mut ctx = Ctx::bind(&mut tape, m.params());
    let r = m.forward(&mut ctx, &Var::constant(uniform(&[1, 3, 12, 16], 0.0, 1.0, 9).cast::<f32>()));
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn padding_only_touches_the_border_region() {
    // the padded rows are reflections, so the crop of a padded forward equals
    // the crop of the forward on the explicitly reflected image
    let m = build_model(&ModelConfig::tiny(), 3).unwrap().cast::<f64>();
    let x = uniform(&[1, 3, 13, 10], 0.0, 1.0, 10);
    let mut tape = Tape::inference();
    let padded = tape.reflect_pad(&Var::constant(x.clone()), 3, 6).unwrap().to_tensor();
    assert_eq!(padded.shape(), &[1, 3, 16, 16]);
    let full = m.restore(&padded).unwrap();
    let cropped = tape.crop(&Var::constant(full), 13, 10).unwrap().to_tensor();
    assert_eq!(m.restore(&x).unwrap(), cropped);
}

#[test]
fn zero_network_returns_input() {
    let mut m = build_model(&ModelConfig::tiny(), 4).unwrap();
    m.zero_weights();
    let x = uniform(&[2, 3, 19, 27], 0.0, 1.0, 11).cast::<f32>();
    assert_eq!(m.restore(&x).unwrap(), x);
}

#[test]
fn single_conv_closed_forms() {
    let c = ConvSpec::same(3, 60, 3);
    assert_eq!(c.num_params(), 1680);
    assert_eq!(c.macs(256, 256), 106_168_320);
}

#[test]
fn counts_depend_on_config_only() {
    let cfg = ModelConfig::small();
    let a = build_model(&cfg, 1).unwrap();
    let b = build_model(&cfg, 999).unwrap();
    for conv in [CountConvention::Exact, CountConvention::ModuleHooks] {
        assert_eq!(count_flops(&a, 256, 256, conv).unwrap(), count_flops(&b, 256, 256, conv).unwrap());
        assert_eq!(a.profile(64, 64).unwrap().params(conv), b.profile(64, 64).unwrap().params(conv));
    }
    assert_eq!(a.count_params(), b.count_params());
}

#[test]
fn exact_params_equal_stored_scalars() {
    for cfg in [ModelConfig::tiny(), ModelConfig::small()] {
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.profile(32, 32).unwrap().params(CountConvention::Exact), m.count_params() as u64);
    }
}

#[test]
fn tape_and_symbolic_counts_agree() {
    for layout in ["C-T-C", "T-C-T"] {
        let cfg = ModelConfig::tiny().with_layout(layout).unwrap();
        let m = build_model(&cfg, 0).unwrap();
        let mut tape = Tape::inference();
        let mut ctx = Ctx::bind(&mut tape, m.params());
        m.forward(&mut ctx, &Var::constant(Tensor::zeros(&[1, 3, 32, 32]))).unwrap();
        assert_eq!(tape.macs(), m.profile(32, 32).unwrap().macs(), "{layout}");
    }
}

#[test]
fn same_seed_same_parameters() {
    let a = build_model(&ModelConfig::tiny(), 42).unwrap();
    let b = build_model(&ModelConfig::tiny(), 42).unwrap();
    let c = build_model(&ModelConfig::tiny(), 43).unwrap();
    assert_eq!(a.params().snapshot(), b.params().snapshot());
    assert_ne!(a.params().snapshot(), c.params().snapshot());
}

#[test]
fn invalid_configs_name_the_stage() {
    let mut cfg = ModelConfig::tiny();
    cfg.heads = 3;
    cfg.layout = "C-C-C-T-C-C-C".parse().unwrap();
    let msg = build_model(&cfg, 0).unwrap_err().to_string();
    assert!(msg.contains("latent"), "{msg}");

    let mut cfg = ModelConfig::tiny();
    cfg.base_dim = 6;
    cfg.expansion = 1.5;
    let msg = build_model(&cfg, 0).unwrap_err().to_string();
    assert!(STAGE_NAMES.iter().any(|s| msg.contains(s)), "{msg}");

    let mut cfg = ModelConfig::tiny();
    cfg.base_dim = 7;
    assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
}

#[test]
fn layout_ordering_of_flops() {
    let flops = |l: &str| {
        let m = build_model(&ModelConfig::small().with_layout(l).unwrap(), 0).unwrap();
        count_flops(&m, 256, 256, CountConvention::ModuleHooks).unwrap()
    };
    let (ccc, ctc, ttt) = (flops("C-C-C"), flops("C-T-C"), flops("T-T-T"));
    assert!(ccc < ctc && ctc < ttt);
    assert_eq!(ModelConfig::small().layout.0[3], StageKind::Transformer);
}
