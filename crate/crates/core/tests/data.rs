mod common;

use std::collections::HashMap;

use common::uniform;
use mdda::data::{
    degrade, extract_patches, flip_augment, load_image, save_image, synthetic_pairs, synthetic_scene, DegradeSpec,
    Degradation, DepthMode, Flip,
};
use mdda::metrics::psnr;
use mdda::tensor::Tensor;
use mdda::Error;
use proptest::prelude::*;

fn scene(seed: u64) -> Tensor<f64> {
    synthetic_scene(48, 40, seed)
}

#[test]
fn zero_noise_and_clear_air_are_identities() {
    let img = scene(1);
    assert_eq!(degrade(&img, &DegradeSpec::noise(0.0, 3)).unwrap(), img);
    for depth in [DepthMode::LinearGradient, DepthMode::Radial] {
        let spec = DegradeSpec { kind: Degradation::Haze { beta: 0.0, airlight: 0.9, depth }, seed: 0 };
        assert_eq!(degrade(&img, &spec).unwrap(), img);
    }
}

#[test]
fn noise_psnr_matches_theory() {
    // sigma 25 on mid-gray stays > 5 sigma from the clamp, so the PSNR is
    // 20 log10(255 / 25) up to sampling error
    let clean = Tensor::<f64>::full(&[1, 3, 64, 64], 0.5);
    let runs: Vec<f64> =
        (0..12).map(|s| psnr(&degrade(&clean, &DegradeSpec::noise(25.0, s)).unwrap(), &clean).unwrap()).collect();
    let mean = runs.iter().sum::<f64>() / runs.len() as f64;
    assert!((mean - 20.17).abs() < 0.3, "{mean}");
}

#[test]
fn degradations_lower_psnr_and_stay_in_range() {
    let img = scene(2);
    let specs = [
        DegradeSpec::noise(15.0, 1),
        DegradeSpec::rain(1),
        DegradeSpec { kind: Degradation::Haze { beta: 1.2, airlight: 0.9, depth: DepthMode::Radial }, seed: 1 },
        DegradeSpec { kind: Degradation::LowLight { gamma: 2.0, gain: 0.6 }, seed: 1 },
    ];
    for spec in specs {
        let d = degrade(&img, &spec).unwrap();
        assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let p = psnr(&d, &img).unwrap();
        assert!(p < 40.0, "{spec:?}: {p}");
        assert_eq!(d, degrade(&img, &spec).unwrap());
    }
}

#[test]
fn invalid_specs_are_config_errors() {
    let img = scene(3);
    for spec in [
        DegradeSpec::noise(-1.0, 0),
        DegradeSpec { kind: Degradation::Haze { beta: 0.5, airlight: 0.0, depth: DepthMode::Radial }, seed: 0 },
        DegradeSpec { kind: Degradation::Haze { beta: 0.5, airlight: 1.5, depth: DepthMode::Radial }, seed: 0 },
    ] {
        assert!(matches!(degrade(&img, &spec), Err(Error::Config(_))));
    }
}

#[test]
fn spec_round_trips_through_json() {
    let spec = DegradeSpec::rain(9);
    let s = serde_json::to_string(&spec).unwrap();
    assert!(s.contains("\"kind\":\"rain_streaks\""));
    assert_eq!(serde_json::from_str::<DegradeSpec>(&s).unwrap(), spec);
}

#[test]
fn patches_index_the_source() {
    let ramp = Tensor::<f64>::from_fn(&[1, 3, 30, 40], |i| i as f64);
    let patches = extract_patches(&ramp, 8, 10, 4).unwrap();
    assert_eq!(patches.len(), 10);
    for p in &patches {
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(p.tensor.at4(0, c, y, x), ramp.at4(0, c, p.top + y, p.left + x));
                }
            }
        }
    }
}

#[test]
fn patch_edge_cases() {
    let img = scene(5);
    assert!(extract_patches(&img, 8, 0, 1).unwrap().is_empty());
    let sq = Tensor::<f64>::from_fn(&[1, 3, 16, 16], |i| i as f64);
    for seed in 0..5 {
        let p = extract_patches(&sq, 16, 1, seed).unwrap();
        assert_eq!(p[0].tensor, sq);
    }
    assert!(matches!(extract_patches(&img, 41, 1, 0), Err(Error::Dimension { .. })));
}

#[test]
fn flips_mirror_coordinates() {
    let mut marker = Tensor::<f64>::zeros(&[1, 3, 5, 7]);
    marker.data_mut()[35 + 7 + 1] = 1.0; // channel 1, y=1, x=1
    let h = Flip::H.apply(&marker).unwrap();
    assert_eq!(h.at4(0, 1, 1, 5), 1.0);
    let v = Flip::V.apply(&marker).unwrap();
    assert_eq!(v.at4(0, 1, 3, 1), 1.0);
    let hv = Flip::HV.apply(&marker).unwrap();
    assert_eq!(hv.at4(0, 1, 3, 5), 1.0);
    assert_eq!(Flip::H.apply(&h).unwrap(), marker);
}

#[test]
fn flip_choice_is_uniform() {
    let mut counts: HashMap<Flip, usize> = HashMap::new();
    for s in 0..1000 {
        *counts.entry(Flip::from_seed(s)).or_default() += 1;
    }
    for f in Flip::ALL {
        let n = counts.get(&f).copied().unwrap_or(0);
        assert!((190..=310).contains(&n), "{f:?}: {n}");
    }
}

#[test]
fn augment_flips_both_images_alike() {
    let a = scene(6);
    let b = a.map(|v| 1.0 - v);
    for seed in 0..8 {
        let (fa, fb) = flip_augment((&a, &b), seed).unwrap();
        assert_eq!(fb, fa.map(|v| 1.0 - v));
    }
    let c = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
    assert!(matches!(flip_augment((&a, &c), 0), Err(Error::Dimension { .. })));
}

#[test]
fn ppm_pixels_decode_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("four.ppm");
    let mut bytes = b"P6\n# corner colours\n2 2\n255\n".to_vec();
    bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
    std::fs::write(&path, bytes).unwrap();
    let t = load_image(&path).unwrap();
    assert_eq!(t.shape(), &[1, 3, 2, 2]);
    assert_eq!(t.data(), &[1., 0., 0., 1., 0., 1., 0., 1., 0., 0., 1., 1.]);
}

#[test]
fn quantized_images_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let q = uniform(&[1, 3, 9, 14], 0.0, 1.0, 7).map(|v| (v * 255.0).round() / 255.0).cast::<f32>();
    for name in ["a.png", "a.ppm", "nested/b.PNG"] {
        let p = dir.path().join(name);
        save_image(&q, &p).unwrap();
        assert_eq!(load_image(&p).unwrap(), q, "{name}");
    }
}

#[test]
fn broken_files_give_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img = scene(8).cast::<f32>();
    for name in ["t.png", "t.ppm"] {
        let p = dir.path().join(name);
        save_image(&img, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_image(&p), Err(Error::Image { .. })), "{name}");
    }
    assert!(matches!(load_image(&dir.path().join("missing.png")), Err(Error::Io { .. })));

    let p = dir.path().join("bad.ppm");
    std::fs::write(&p, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    assert!(matches!(load_image(&p), Err(Error::Image { .. })));

    let p = dir.path().join("gray.png");
    {
        let f = std::fs::File::create(&p).unwrap();
        let mut enc = png::Encoder::new(std::io::BufWriter::new(f), 2, 2);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        enc.write_header().unwrap().write_image_data(&[0, 64, 128, 255]).unwrap();
    }
    let err = load_image(&p).unwrap_err();
    assert!(matches!(err, Error::Image { .. }), "{err}");
    assert!(matches!(save_image(&img, &dir.path().join("x.jpg")), Err(Error::Image { .. })));
}

#[test]
fn synthetic_pairs_are_reproducible() {
    let a = synthetic_pairs::<f32>(6, 16, &DegradeSpec::noise(25.0, 1), 2).unwrap();
    let b = synthetic_pairs::<f32>(6, 16, &DegradeSpec::noise(25.0, 1), 2).unwrap();
    assert_eq!(a.len(), 6);
    assert_eq!(a.degraded, b.degraded);
    assert_eq!(a.clean, b.clean);
    assert_ne!(a.degraded[0], a.degraded[1]);
    assert!(a.clean.iter().all(|c| c.shape() == [1, 3, 16, 16]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn degradation_is_deterministic_and_clamped(sigma in 0.0f64..60.0, seed in any::<u64>()) {
        let img = synthetic_scene::<f64>(12, 12, seed);
        let spec = DegradeSpec::noise(sigma, seed);
        let d = degrade(&img, &spec).unwrap();
        prop_assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(d, degrade(&img, &spec).unwrap());
    }

    #[test]
    fn double_flip_is_identity(seed in any::<u64>()) {
        let img = synthetic_scene::<f64>(6, 9, seed);
        let f = Flip::from_seed(seed);
        prop_assert_eq!(f.apply(&f.apply(&img).unwrap()).unwrap(), img);
    }
}
