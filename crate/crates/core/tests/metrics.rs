#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use proptest::prelude::*;
use stereoinr::disparity::{BlockMatcher, DisparityConfig, DisparityField};
use stereoinr::imaging::{Image, StereoPair};
use stereoinr::metrics::{
    disparity_mae, evaluate_pair, psnr, score_formula, score_metric, ssim, MetricsReport, PerceptualDistance,
    SsimProxy,
};
use stereoinr::Error;

#[test]
fn psnr_closed_forms() {
    let a = random_image(8, 8, 1);
    assert_eq!(psnr(&a, &a).unwrap(), 100.0);
    let b = Image::filled(8, 8, 0.5);
    let c = Image::filled(8, 8, 0.51);
    assert!((psnr(&b, &c).unwrap() - 40.0).abs() < 1e-9);
    assert!(matches!(psnr(&a, &random_image(8, 9, 1)), Err(Error::Shape(_))));
}

#[test]
fn psnr_matches_loop_oracle() {
    let (a, b) = (random_image(8, 8, 2), random_image(8, 8, 3));
    let mut se = 0.0;
    for y in 0..8 {
        for x in 0..8 {
            for c in 0..3 {
                se += (a.get(y, x, c) - b.get(y, x, c)).powi(2);
            }
        }
    }
    let expect = 10.0 * (1.0 / (se / 192.0)).log10();
    assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
}

/// Direct 2-D windowed SSIM over luma.
fn ssim_oracle(a: &Image, b: &Image) -> f64 {
    let (h, w) = a.dims();
    let (la, lb) = (a.luma(), b.luma());
    let mut g = [[0.0; 11]; 11];
    let mut total = 0.0;
    for (i, row) in g.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let mut n = 0.0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let wgt = g[i][j] / total;
                    let p = (y0 + i) * w + x0 + j;
                    ma += wgt * la[p];
                    mb += wgt * lb[p];
                    saa += wgt * la[p] * la[p];
                    sbb += wgt * lb[p] * lb[p];
                    sab += wgt * la[p] * lb[p];
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1.0;
        }
    }
    acc / n
}

#[test]
fn ssim_identity_and_inverted_binary() {
    let a = random_image(16, 20, 4);
    assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    let bits = Image::from_fn(14, 13, |y, x, _| ((y * 7 + x * 3) % 5 < 2) as u8 as f64);
    let inv = Image::from_fn(14, 13, |y, x, c| 1.0 - bits.get(y, x, c));
    let s = ssim(&bits, &inv).unwrap();
    assert!((s - ssim_oracle(&bits, &inv)).abs() < 1e-9);
    assert!(s < 0.0);
    assert!(matches!(ssim(&random_image(10, 20, 1), &random_image(10, 20, 2)), Err(Error::Argument(_))));
}

#[test]
fn ssim_matches_window_oracle_on_random_images() {
    let (a, b) = (random_image(12, 15, 5), random_image(12, 15, 6));
    assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-9);
    assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ssim_never_exceeds_one(seed in 0u64..1000, noise in 0.0f64..0.5) {
        let a = random_image(12, 12, seed);
        let n = random_image(12, 12, seed + 1);
        let b = Image::new(12, 12, a.pixels() + &(n.pixels() * noise)).unwrap().clamp01();
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn score_is_monotone(p in 0.0f64..1.0, q in 0.0f64..1.0, l in 0.0f64..5.0, dp in 0.0f64..0.5, dl in 0.0f64..2.0) {
        let s = score_formula(p, q, l);
        prop_assert!(s <= 1.0);
        prop_assert!(score_formula(p + dp, q, l) <= s);
        prop_assert!(score_formula(p, q + dp, l) <= s);
        prop_assert!(score_formula(p, q, l + dl) <= s);
    }
}

#[test]
fn disparity_mae_cases() {
    let a = DisparityField::constant(4, 5, 2.0);
    assert_eq!(disparity_mae(&a, &a).unwrap(), 0.0);
    let b = DisparityField::constant(4, 5, 3.0);
    assert_eq!(disparity_mae(&a, &b).unwrap(), 1.0);

    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(7);
    let x = rand_mat(&mut rng, 1, 30);
    let y = rand_mat(&mut rng, 1, 30);
    let mut f1 = DisparityField::zeros(5, 6);
    let mut f2 = DisparityField::zeros(5, 6);
    let (mut acc, mut n) = (0.0, 0.0);
    for i in 0..30 {
        f1.d[i] = x[[0, i]] * 4.0;
        f2.d[i] = y[[0, i]] * 4.0;
        f1.valid[i] = i % 3 != 0;
        f2.valid[i] = i % 4 != 1;
        if f1.valid[i] && f2.valid[i] {
            acc += (f1.d[i] - f2.d[i]).abs();
            n += 1.0;
        }
    }
    assert!((disparity_mae(&f1, &f2).unwrap() - acc / n).abs() < 1e-12);
    f2.valid.iter_mut().for_each(|v| *v = false);
    assert!(matches!(disparity_mae(&f1, &f2), Err(Error::UndefinedMetric(_))));
    assert!(matches!(disparity_mae(&a, &DisparityField::zeros(4, 6)), Err(Error::Shape(_))));
}

#[test]
fn score_arithmetic() {
    assert!((score_formula(0.2, 0.2, 0.0) - 0.8).abs() < 1e-12);
    assert!((score_formula(0.0, 0.0, 1.0) - 0.9).abs() < 1e-12);
    assert_eq!(score_formula(0.0, 0.0, 0.0), 1.0);
}

fn matcher() -> BlockMatcher {
    BlockMatcher::new(DisparityConfig {
        max_disparity: 6,
        window: 7,
    })
}

#[test]
fn identical_pairs_score_one() {
    let p = shifted_pair(24, 36, 2);
    let s = score_metric(&p, &p, &SsimProxy, &matcher()).unwrap();
    assert_eq!(s.score, 1.0);
    assert_eq!(SsimProxy.distance(&p.left, &p.left).unwrap(), 0.0);
}

#[test]
fn report_is_deterministic_and_follows_schema() {
    let hr = shifted_pair(24, 36, 2);
    let noise = random_image(24, 36, 9);
    let blur = |i: &Image| Image::new(24, 36, i.pixels() * 0.9 + &(noise.pixels() * 0.1)).unwrap();
    let sr = StereoPair::new(blur(&hr.left), blur(&hr.right)).unwrap();
    let make = || {
        let m = evaluate_pair("p0", &sr, &hr, 4, &SsimProxy, &matcher()).unwrap();
        MetricsReport::new("bicubic", 2.0, 4, &SsimProxy, &matcher(), vec![m]).unwrap().to_json().unwrap()
    };
    let a = make();
    assert_eq!(a, make());
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let schema: serde_json::Value =
        serde_json::from_str(include_str!("../schema/metrics_report.schema.json")).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    assert!(validator.is_valid(&v));
    let mut extra = v.clone();
    extra["surprise"] = serde_json::json!(1);
    assert!(!validator.is_valid(&extra));
    let parsed: MetricsReport = serde_json::from_str(&a).unwrap();
    assert!(parsed.aggregate.score <= 1.0);
    assert_eq!(parsed.perceptual_backend, "ssim-proxy");
    assert_eq!(parsed.disparity_backend, "block-ncc");
}
