use mdda::data::{synthetic_pairs, DegradeSpec, PairSet};
use mdda::network::{build_model, ModelConfig};
use mdda::nn::ParamStore;
use mdda::tensor::{Tape, Tensor, Var};
use mdda::train::{
    adamw_step, batch_indices, cosine_lr, evaluate, load_checkpoint, psnr_loss, save_checkpoint, train_loop, AdamW,
    OptState, Schedule, TrainConfig,
};
use mdda::Error;
use proptest::prelude::*;

fn scalar(p: f64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.push("p", Tensor::scalar(p)).unwrap();
    s
}

fn no_decay() -> AdamW {
    AdamW { weight_decay: 0.0, ..AdamW::default() }
}

fn value(s: &ParamStore<f64>) -> f64 {
    s.iter().next().unwrap().2.data()[0]
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut s = scalar(1.5);
    let mut opt = OptState::new(&s, no_decay());
    for _ in 0..3 {
        adamw_step(&mut s, &[Some(Tensor::scalar(0.0))], &mut opt, 0.1).unwrap();
    }
    assert_eq!(value(&s), 1.5);
}

#[test]
fn first_step_moves_by_lr() {
    let mut s = scalar(1.0);
    let mut opt = OptState::new(&s, no_decay());
    adamw_step(&mut s, &[Some(Tensor::scalar(1.0))], &mut opt, 0.1).unwrap();
    assert!((value(&s) - 0.9).abs() < 1e-6);
    assert_eq!(opt.step, 1);
}

#[test]
fn converges_on_a_quadratic() {
    let mut s = scalar(0.0);
    let mut opt = OptState::new(&s, no_decay());
    for _ in 0..100 {
        let g = 2.0 * (value(&s) - 3.0);
        adamw_step(&mut s, &[Some(Tensor::scalar(g))], &mut opt, 0.05).unwrap();
    }
    assert!((value(&s) - 3.0).abs() < 0.1, "{}", value(&s));
}

#[test]
fn weight_decay_is_decoupled() {
    let mut s = scalar(2.0);
    let hyper = AdamW { weight_decay: 0.5, ..AdamW::default() };
    let mut opt = OptState::new(&s, hyper);
    adamw_step(&mut s, &[Some(Tensor::scalar(0.0))], &mut opt, 0.1).unwrap();
    assert!((value(&s) - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-12);
}

#[test]
fn non_finite_gradient_changes_nothing() {
    let mut s = ParamStore::new();
    s.push("a", Tensor::scalar(1.0)).unwrap();
    s.push("bad", Tensor::scalar(1.0)).unwrap();
    let mut opt = OptState::new(&s, AdamW::default());
    let before = (s.clone(), opt.clone());
    let err = adamw_step(&mut s, &[Some(Tensor::scalar(1.0)), Some(Tensor::scalar(f64::NAN))], &mut opt, 0.1).unwrap_err();
    assert!(err.to_string().contains("bad"), "{err}");
    assert_eq!(s.snapshot(), before.0.snapshot());
    assert_eq!(opt, before.1);
}

#[test]
fn cosine_endpoints() {
    let sch = Schedule::new(1000);
    assert_eq!(cosine_lr(0, &sch), 2e-4);
    assert!((cosine_lr(1000, &sch) - 1e-6).abs() < 1e-18);
    assert!((cosine_lr(500, &sch) - 1.005e-4).abs() < 1e-15);
    assert_eq!(cosine_lr(1500, &sch), 1e-6);
    assert_eq!(cosine_lr(0, &Schedule::new(0)), 2e-4);
}

proptest! {
    #[test]
    fn cosine_is_monotone(total in 1u64..5000, a in 0u64..5000, b in 0u64..5000) {
        let sch = Schedule::new(total);
        let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
        prop_assert!(cosine_lr(lo, &sch) >= cosine_lr(hi, &sch));
        prop_assert!(cosine_lr(hi, &sch) >= sch.lr_min);
    }
}

#[test]
fn psnr_loss_values_and_errors() {
    let mut t = Tape::<f64>::inference();
    let a = Var::constant(Tensor::full(&[1, 3, 4, 4], 0.3));
    let b = Var::constant(Tensor::full(&[1, 3, 4, 4], 0.4));
    assert!((psnr_loss(&mut t, &a, &a).unwrap().value().data()[0] + 80.0).abs() < 1e-9);
    // the 1e-8 floor shifts a 20 dB loss by 10 log10(1 + 1e-6) = 4.3e-6
    assert!((psnr_loss(&mut t, &a, &b).unwrap().value().data()[0] + 20.0).abs() < 1e-5);
    let c = Var::constant(Tensor::zeros(&[1, 3, 4, 5]));
    assert!(matches!(psnr_loss(&mut t, &a, &c), Err(Error::Dimension { .. })));
}

fn pairs() -> PairSet<f32> {
    synthetic_pairs(6, 16, &DegradeSpec::noise(25.0, 4), 1).unwrap()
}

#[test]
fn zero_steps_leave_the_model_alone() {
    let mut m = build_model(&ModelConfig::tiny(), 2).unwrap();
    let before = m.params().snapshot();
    let mut opt = OptState::new(m.params(), AdamW::default());
    let trace = train_loop(&mut m, &mut opt, &pairs(), None, &TrainConfig::new(0, 2, 1), None, |_| {}).unwrap();
    assert!(trace.is_empty());
    assert_eq!(m.params().snapshot(), before);
}

#[test]
fn trace_rows_and_evaluation_schedule() {
    let data = pairs();
    let mut m = build_model(&ModelConfig::tiny(), 2).unwrap();
    let mut opt = OptState::new(m.params(), AdamW::default());
    let cfg = TrainConfig { eval_every: 2, ..TrainConfig::new(5, 2, 1) };
    let mut seen = 0;
    let trace = train_loop(&mut m, &mut opt, &data, Some(&data), &cfg, None, |_| seen += 1).unwrap();
    assert_eq!(seen, 5);
    let steps: Vec<u64> = trace.iter().map(|r| r.step).collect();
    assert_eq!(steps, [1, 2, 3, 4, 5]);
    let evaluated: Vec<u64> = trace.iter().filter(|r| r.eval_psnr.is_some()).map(|r| r.step).collect();
    assert_eq!(evaluated, [2, 4, 5]);
    assert_eq!(trace[0].lr, cfg.lr_init);
    assert!((trace[4].eval_psnr.unwrap() - evaluate(&m, &data).unwrap()).abs() < 1e-12);
}

#[test]
fn empty_data_and_zero_batch_are_config_errors() {
    let mut m = build_model(&ModelConfig::tiny(), 2).unwrap();
    let mut opt = OptState::new(m.params(), AdamW::default());
    let r = train_loop(&mut m, &mut opt, &PairSet::default(), None, &TrainConfig::new(3, 2, 1), None, |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
    let r = train_loop(&mut m, &mut opt, &pairs(), None, &TrainConfig::new(3, 0, 1), None, |_| {});
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn nan_aborts_and_keeps_earlier_checkpoints() {
    let mut data = pairs();
    let cfg = TrainConfig { checkpoint_every: 1, augment: false, ..TrainConfig::new(6, 1, 3) };
    // poison the sample drawn at the third step
    let bad = batch_indices(data.len(), 1, cfg.seed, 2)[0];
    assert!(!(0..2).any(|s| batch_indices(data.len(), 1, cfg.seed, s)[0] == bad));
    data.degraded[bad].data_mut()[5] = f32::NAN;

    let dir = tempfile::tempdir().unwrap();
    let mut m = build_model(&ModelConfig::tiny(), 2).unwrap();
    let mut opt = OptState::new(m.params(), AdamW::default());
    let r = train_loop(&mut m, &mut opt, &data, None, &cfg, Some(dir.path()), |_| {});
    assert!(matches!(r, Err(Error::NonFinite { .. })), "{r:?}");
    let ck = load_checkpoint(&dir.path().join("latest.ckpt")).unwrap();
    assert_eq!(ck.opt.step, 2);
    assert_eq!(ck.model.params().snapshot(), m.params().snapshot());
    assert!(dir.path().join("step-000002.ckpt").exists());
    assert!(!dir.path().join("step-000003.ckpt").exists());
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let data = pairs();
    let mut m = build_model(&ModelConfig::tiny(), 2).unwrap();
    let mut opt = OptState::new(m.params(), AdamW::default());
    let cfg = TrainConfig::new(2, 2, 1);
    train_loop(&mut m, &mut opt, &data, None, &cfg, None, |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub").join("m.ckpt");
    save_checkpoint(&path, &m, &opt, Some(&cfg)).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.model.config(), m.config());
    assert_eq!(ck.model.params().snapshot(), m.params().snapshot());
    assert_eq!(ck.opt, opt);
    assert_eq!(ck.train, Some(cfg));
    assert!(!dir.path().join("sub").join("m.ckpt.tmp").exists());

    let bytes = std::fs::read(&path).unwrap();
    for cut in [10, bytes.len() / 3, bytes.len() - 4] {
        std::fs::write(&path, &bytes[..cut]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    std::fs::write(&path, &extra).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    let mut wrong = bytes;
    wrong[0] = b'X';
    std::fs::write(&path, &wrong).unwrap();
    assert!(load_checkpoint(&path).unwrap_err().to_string().contains("magic"));
}

#[test]
fn optimizer_shape_mismatch_names_parameter() {
    let m = build_model(&ModelConfig::tiny(), 2).unwrap();
    let mut opt = OptState::new(m.params(), AdamW::default());
    opt.m[0] = Tensor::zeros(&[1]);
    let dir = tempfile::tempdir().unwrap();
    let err = save_checkpoint(&dir.path().join("x.ckpt"), &m, &opt, None).unwrap_err();
    assert!(err.to_string().contains("embed.weight"), "{err}");
}
