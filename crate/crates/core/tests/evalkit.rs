use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use relight_core::colorlab::{lab_to_srgb, srgb_to_lab, ImageRGB};
use relight_core::dirmath::DirectionSet;
use relight_core::evalkit::{evaluate, psnr, ssim, MetricReport};
use relight_core::relightgen::{synth_scene, MultiLightDataset, Preset, SynthOptions};
use relight_core::splatfield::{render, AppearanceMlp, AuxLatent, SceneMetadata, SplatCloud, SplatScene, FEATURE_DIM, LATENT_DIM};
use relight_core::trainfield::infer_latent;

fn textured(w: usize, h: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageRGB::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
}

/// Direct 2-D windowed SSIM: every 11x11 window is weighted explicitly,
/// with no separable filtering.
fn ssim_direct(a: &ImageRGB, b: &ImageRGB) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.0001, 0.0009);
    let (w, h) = (a.width(), a.height());
    let mut total = 0.0;
    let mut count = 0;
    for c in 0..3 {
        for y0 in 0..=h - 11 {
            for x0 in 0..=w - 11 {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..11 {
                    for i in 0..11 {
                        let wt = g[i] * g[j] / norm;
                        let x = a.pixel(x0 + i, y0 + j)[c] as f64;
                        let y = b.pixel(x0 + i, y0 + j)[c] as f64;
                        mx += wt * x;
                        my += wt * y;
                        sxx += wt * x * x;
                        syy += wt * y * y;
                        sxy += wt * x * y;
                    }
                }
                let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[test]
fn ssim_agrees_with_direct_windows() {
    let a = textured(20, 16, 1);
    let b = ImageRGB::from_fn(20, 16, |x, y| a.pixel(x, y).map(|v| 1.0 - v));
    let fast = ssim(&a, &b).unwrap();
    assert!((fast - ssim_direct(&a, &b)).abs() < 1e-9);
    assert!(fast < 0.2);
    let c = textured(20, 16, 2);
    assert!((ssim(&a, &c).unwrap() - ssim_direct(&a, &c)).abs() < 1e-9);
}

#[test]
fn psnr_falls_as_noise_grows() {
    let base = textured(32, 32, 5);
    let mut last = f64::INFINITY;
    for amp in [0.01f32, 0.02, 0.05, 0.1, 0.2] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noisy = ImageRGB::from_fn(32, 32, |x, y| base.pixel(x, y).map(|v| (v + rng.gen_range(-amp..amp)).clamp(0.0, 1.0)));
        let p = psnr(&base, &noisy).unwrap();
        assert!(p < last, "amplitude {amp}: {p} >= {last}");
        last = p;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn ssim_is_bounded(seed in any::<u64>(), w in 11usize..20, h in 11usize..20) {
        let a = textured(w, h, seed);
        let b = textured(w, h, seed.wrapping_add(1));
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!(s < 1.0);
    }
}

#[test]
fn report_aggregates_and_formats() {
    let mut report = MetricReport::from_entries("s", vec![]);
    assert_eq!((report.aggregates.psnr, report.aggregates.ssim), (0.0, 0.0));
    let entries = (0..5)
        .map(|i| relight_core::evalkit::MetricEntry { view: format!("v{i}"), light: i, psnr: 20.0 + i as f64 * 1.3, ssim: 0.5 + i as f64 * 0.07, lpips: None })
        .collect::<Vec<_>>();
    report = MetricReport::from_entries("s", entries);
    let n = report.entries.len() as f64;
    let mean_psnr: f64 = report.entries.iter().map(|e| e.psnr).sum::<f64>() / n;
    assert!((report.aggregates.psnr - mean_psnr).abs() < 1e-9);

    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    assert_eq!(json["scene"], "s");
    assert_eq!(json["entries"].as_array().unwrap().len(), 5);
    assert!(json["entries"][0]["lpips"].is_null());
    assert!(json["aggregates"]["ssim"].is_number());
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 6);
    assert!(csv.starts_with("scene,view,light,psnr,ssim,lpips"));

    let dir = tempfile::tempdir().unwrap();
    report.save(&dir.path().join("report.json")).unwrap();
    assert!(dir.path().join("report.csv").exists());
}

fn toy_scene() -> SplatScene {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut splats = SplatCloud::zeros(0);
    for _ in 0..60 {
        let p = [rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6)];
        splats.push(p, [1.0, 0.0, 0.0, 0.0], [-2.0; 3], 1.0, [0.0; FEATURE_DIM].map(|_| rng.gen_range(-1.0..1.0)));
    }
    SplatScene {
        splats,
        mlp: AppearanceMlp::random(&mut rng),
        latents: vec![
            AuxLatent { view_id: "a".into(), a: vec![0.2; LATENT_DIM] },
            AuxLatent { view_id: "b".into(), a: vec![-0.1; LATENT_DIM] },
        ],
        background: [0.1, 0.1, 0.1],
        metadata: SceneMetadata { radius: 1.0, ..Default::default() },
    }
}

fn test_set(scene: &SplatScene, offset_l: f64) -> MultiLightDataset {
    let dirs = DirectionSet::default_set().directions().unwrap();
    let opts = SynthOptions { train_views: 1, test_views: 2, width: 16, height: 16, points: 50, ..SynthOptions::new(Preset::Spheres) };
    let mut test = synth_scene(&opts, &dirs[..3]).unwrap().test;
    let latent = infer_latent(scene).unwrap();
    for (v, view) in test.base.views.iter().enumerate() {
        for k in 0..3 {
            let img = render(scene, &view.pose, Some(&test.light_dir_world(v, k)), &latent).unwrap().color;
            // The stored ground truth is the render shifted in lightness.
            let mut lab = srgb_to_lab(&img);
            lab.data.chunks_exact_mut(3).for_each(|p| p[0] = (p[0] - offset_l).max(0.0));
            test.relit[v][k] = if offset_l == 0.0 { img } else { lab_to_srgb(&lab) };
        }
    }
    test
}

#[test]
fn self_evaluation_hits_the_cap_and_normalization_helps() {
    let scene = toy_scene();
    let exact = evaluate(&scene, &test_set(&scene, 0.0), false, "toy").unwrap();
    assert_eq!(exact.entries.len(), 6);
    assert!(exact.entries.iter().all(|e| e.psnr == 99.0 && e.ssim == 1.0));

    let shifted = test_set(&scene, 8.0);
    let off = evaluate(&scene, &shifted, false, "toy").unwrap();
    let on = evaluate(&scene, &shifted, true, "toy").unwrap();
    assert!(on.aggregates.psnr > off.aggregates.psnr, "{} vs {}", on.aggregates.psnr, off.aggregates.psnr);

    let mut empty = shifted.clone();
    empty.base.views.clear();
    empty.relit.clear();
    let r = evaluate(&scene, &empty, true, "toy").unwrap();
    assert!(r.entries.is_empty() && r.aggregates.psnr == 0.0);
}
