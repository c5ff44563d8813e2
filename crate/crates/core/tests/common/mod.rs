#![allow(dead_code)]

pub mod oracle;

use mdda::blocks::{etb_forward, mdab_forward, EtbParams, MdabParams, ShortcutSource};
use mdda::dynconv::{mdconv_forward, DynKernel};
use mdda::nn::{Ctx, ParamBuilder, ParamStore};
use mdda::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use mdda::train::psnr_loss;
use mdda::Result;
use rand::rngs::Xoshiro256PlusPlus;
use rand::SeedableRng;

pub const H: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> Xoshiro256PlusPlus {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, &mut rng(seed))
}

/// `sum(y * r)` for a fixed random `r`, so every output element gets its own
/// non-trivial weight (a plain sum has zero gradient through LayerNorm and
/// softmax).
pub fn weighted_sum(t: &mut Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = Var::constant(randn(y.shape(), seed ^ 0x5EED));
    let p = t.mul(y, &r)?;
    t.sum(&p)
}

type Case = (&'static str, Box<dyn Fn() -> Result<GradCheckReport>>);

fn unary(
    name: &'static str,
    x: Tensor<f64>,
    f: impl Fn(&mut Tape<f64>, &Var<f64>) -> Result<Var<f64>> + 'static,
) -> Case {
    (
        name,
        Box::new(move || {
            let mut leaves = vec![x.clone()];
            grad_check(&mut leaves, |t, v| { let y = f(t, &v[0])?; weighted_sum(t, &y, 1) }, H, usize::MAX, 0)
        }),
    )
}

fn multi(
    name: &'static str,
    xs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Tape<f64>, &[Var<f64>]) -> Result<Var<f64>> + 'static,
) -> Case {
    (
        name,
        Box::new(move || {
            let mut leaves = xs.clone();
            grad_check(&mut leaves, |t, v| { let y = f(t, v)?; weighted_sum(t, &y, 2) }, H, usize::MAX, 0)
        }),
    )
}

/// Leaves are `[x, params...]` in store order; `f` runs the layer.
fn layer(
    name: &'static str,
    x: Tensor<f64>,
    store: ParamStore<f64>,
    f: impl Fn(&mut Ctx<'_, f64>, &Var<f64>) -> Result<Var<f64>> + 'static,
) -> Case {
    (
        name,
        Box::new(move || {
            let mut leaves = vec![x.clone()];
            leaves.extend(store.snapshot());
            grad_check(
                &mut leaves,
                |t, v| {
                    let y = {
                        let mut ctx = Ctx::from_vars(t, v[1..].to_vec());
                        f(&mut ctx, &v[0])?
                    };
                    weighted_sum(t, &y, 3)
                },
                H,
                usize::MAX,
                0,
            )
        }),
    )
}

/// Randomizes every parameter so no gradient path is trivially constant.
fn perturb(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
    let ids: Vec<_> = store.ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let shape = store.get(id).shape().to_vec();
        let base = store.get(id).clone();
        let noise = randn(&shape, seed + i as u64);
        let v = Tensor::new(&shape, base.data().iter().zip(noise.data()).map(|(b, n)| b + scale * n).collect()).unwrap();
        store.set(id, v).unwrap();
    }
}

/// Every case of the gradient suite: primitive ops, MDConv, MDAB, ETB and
/// the PSNR loss. All probes are at most `1x8x4x4`.
pub fn grad_suite() -> Vec<Case> {
    let x = randn(&[1, 4, 4, 4], 10);
    let mut cases = vec![
        multi("conv2d 3x3", vec![randn(&[1, 3, 4, 4], 11), randn(&[4, 3, 3, 3], 12), randn(&[4], 13)], |t, v| {
            t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1, 1)
        }),
        multi("conv2d stride 2", vec![randn(&[2, 2, 4, 4], 14), randn(&[3, 2, 3, 3], 15)], |t, v| {
            t.conv2d(&v[0], &v[1], None, 2, 1, 1)
        }),
        multi("conv2d grouped", vec![randn(&[1, 4, 4, 4], 16), randn(&[6, 2, 3, 3], 17), randn(&[6], 18)], |t, v| {
            t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1, 2)
        }),
        multi("conv2d depthwise", vec![randn(&[1, 4, 4, 4], 19), randn(&[4, 1, 3, 3], 20), randn(&[4], 21)], |t, v| {
            t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 1, 4)
        }),
        multi("conv2d pointwise", vec![randn(&[2, 3, 4, 4], 22), randn(&[5, 3, 1, 1], 23), randn(&[5], 24)], |t, v| {
            t.conv2d(&v[0], &v[1], Some(&v[2]), 1, 0, 1)
        }),
        multi("dynamic_conv", vec![randn(&[2, 3, 4, 4], 25), randn(&[2, 2, 3, 3, 3], 26)], |t, v| {
            t.dynamic_conv(&v[0], &v[1], 1, 1)
        }),
        multi(
            "modulate_kernel",
            vec![randn(&[3, 2, 3, 3], 27), randn(&[2, 3, 3], 28), randn(&[2, 2], 29), randn(&[2, 3], 30)],
            |t, v| t.modulate_kernel(&v[0], &v[1], &v[2], &v[3]),
        ),
        multi("layer_norm", vec![randn(&[2, 5, 2, 3], 31), randn(&[5], 32), randn(&[5], 33)], |t, v| {
            t.layer_norm(&v[0], &v[1], &v[2], 1e-5)
        }),
        unary("softmax", randn(&[2, 3, 5], 34), |t, x| t.softmax(x)),
        unary("pixel_unshuffle", randn(&[1, 2, 4, 4], 35), |t, x| t.pixel_unshuffle(x, 2)),
        unary("pixel_shuffle", randn(&[1, 8, 2, 2], 36), |t, x| t.pixel_shuffle(x, 2)),
        unary("slice_channels", x.clone(), |t, x| t.slice_channels(x, 1, 2)),
        unary("chunk2", x.clone(), |t, x| {
            let (a, b) = t.chunk2(x)?;
            t.mul(&a, &b)
        }),
        multi("concat_channels", vec![randn(&[1, 2, 3, 3], 37), randn(&[1, 3, 3, 3], 38)], |t, v| {
            t.concat_channels(&[&v[0], &v[1]])
        }),
        multi("matmul batched", vec![randn(&[2, 3, 4], 39), randn(&[2, 4, 5], 40)], |t, v| t.matmul(&v[0], &v[1])),
        multi("matmul 2d", vec![randn(&[3, 4], 41), randn(&[4, 2], 42)], |t, v| t.matmul(&v[0], &v[1])),
        unary("transpose", randn(&[2, 3, 4], 43), |t, x| t.transpose_last_two(x)),
        unary("reshape", x.clone(), |t, x| t.reshape(x, &[4, 16])),
        // kept away from the kink at zero
        unary(
            "relu",
            Tensor::from_fn(&[1, 2, 3, 3], |i| if i % 2 == 0 { 0.3 + i as f64 * 0.1 } else { -0.2 - i as f64 * 0.1 }),
            |t, x| t.relu(x),
        ),
        unary("sigmoid", randn(&[1, 2, 3, 3], 44), |t, x| t.sigmoid(x)),
        multi("add", vec![randn(&[2, 3], 45), randn(&[2, 3], 46)], |t, v| t.add(&v[0], &v[1])),
        multi("sub", vec![randn(&[2, 3], 47), randn(&[2, 3], 48)], |t, v| t.sub(&v[0], &v[1])),
        multi("mul", vec![randn(&[2, 3], 49), randn(&[2, 3], 50)], |t, v| t.mul(&v[0], &v[1])),
        unary("scale", randn(&[2, 3], 51), |t, x| t.scale(x, -1.7)),
        unary("add_const", randn(&[2, 3], 52), |t, x| t.add_const(x, 0.25)),
        multi("channel_scale", vec![randn(&[2, 3, 2, 2], 53), randn(&[3], 54)], |t, v| t.channel_scale(&v[0], &v[1])),
        multi("div_scalar", vec![randn(&[2, 3, 3], 55), uniform(&[1], 0.5, 1.5, 56)], |t, v| t.div_scalar(&v[0], &v[1])),
        unary("global_avg_pool", randn(&[2, 3, 3, 2], 57), |t, x| t.global_avg_pool(x)),
        multi("linear", vec![randn(&[2, 4], 58), randn(&[3, 4], 59), randn(&[3], 60)], |t, v| {
            t.linear(&v[0], &v[1], Some(&v[2]))
        }),
        unary("ln", uniform(&[2, 3], 0.5, 2.0, 61), |t, x| t.ln(x)),
        unary("sum", randn(&[2, 3], 62), |t, x| t.sum(x)),
        unary("mean", randn(&[2, 3], 63), |t, x| t.mean(x)),
        unary("reflect_pad", randn(&[1, 2, 3, 4], 64), |t, x| t.reflect_pad(x, 2, 3)),
        unary("crop", randn(&[1, 2, 5, 6], 65), |t, x| t.crop(x, 3, 4)),
    ];

    let mut store = ParamStore::new();
    let dk = DynKernel::new(&mut ParamBuilder::new(&mut store, 70), "mdconv", 4, 4, 3).unwrap();
    perturb(&mut store, 71, 0.3);
    cases.push(layer("MDConv (W and all attention params)", randn(&[1, 4, 4, 4], 72), store, move |ctx, x| {
        mdconv_forward(ctx, x, &dk)
    }));

    let mut store = ParamStore::new();
    let p = MdabParams::new(&mut ParamBuilder::new(&mut store, 73), "mdab", 4, 2.0).unwrap();
    perturb(&mut store, 74, 0.3);
    cases.push(layer("MDAB", randn(&[1, 4, 4, 4], 75), store, move |ctx, x| mdab_forward(ctx, x, &p)));

    for (name, src, e) in [
        ("ETB (incl. alpha, k1, k2)", ShortcutSource::BlockInput, 2.0),
        ("ETB shortcut from attention output", ShortcutSource::TsaOutput, 2.0),
        ("ETB e=1 with projection", ShortcutSource::BlockInput, 1.0),
    ] {
        let mut store = ParamStore::new();
        let p = EtbParams::new(&mut ParamBuilder::new(&mut store, 76), "etb", 8, e, 1, src).unwrap();
        // small enough that the 16-pixel attention logits do not saturate the
        // softmax, which would leave gradients below the difference noise floor
        perturb(&mut store, 77, 0.1);
        cases.push(layer(name, randn(&[1, 8, 4, 4], 78), store, move |ctx, x| etb_forward(ctx, x, &p)));
    }

    cases.push(("psnr_loss", Box::new(|| {
        let mut leaves = vec![uniform(&[1, 3, 8, 8], 0.0, 1.0, 79)];
        let target = uniform(&[1, 3, 8, 8], 0.0, 1.0, 80);
        grad_check(
            &mut leaves,
            move |t, v| psnr_loss(t, &v[0], &Var::constant(target.clone())),
            H,
            usize::MAX,
            0,
        )
    })));
    cases
}
