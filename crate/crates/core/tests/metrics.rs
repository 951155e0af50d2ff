mod common;

use common::random_image;
use crrn::image_model::{GradientMap, ImagePlane};
use crrn::metrics::{evaluate_pair, l1_loss, loss_si, loss_ssim, regional, si, ssim, total_loss, LossWeights, MetricKind, SsimConfig};
use crrn::synthesis::RegionMask;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian_window(cfg: &SsimConfig) -> Vec<Vec<f64>> {
    let r = cfg.radius() as f64;
    let n = cfg.window_size;
    let mut w = vec![vec![0.0; n]; n];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let d2 = (i as f64 - r).powi(2) + (j as f64 - r).powi(2);
            *v = (-d2 / (2.0 * cfg.window_sigma * cfg.window_sigma)).exp();
            total += *v;
        }
    }
    w.iter_mut().flatten().for_each(|v| *v /= total);
    w
}

#[test]
fn si_of_doubled_image_matches_closed_form() {
    // y = 2x gives cov = 2 var_x and var_y = 4 var_x in every window.
    let cfg = SsimConfig::with_window(7, 1.5);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_image(8, 8, 1, 0.0, 0.5, &mut rng);
    let y = ImagePlane::new(8, 8, 1, x.data().iter().map(|v| 2.0 * v).collect()).unwrap();
    let w = gaussian_window(&cfg);
    let mut expected = 0.0;
    for oy in 0..2 {
        for ox in 0..2 {
            let (mut mean, mut sq) = (0.0, 0.0);
            for (i, row) in w.iter().enumerate() {
                for (j, &wt) in row.iter().enumerate() {
                    let v = x.get(0, oy + i, ox + j) as f64;
                    mean += wt * v;
                    sq += wt * v * v;
                }
            }
            let var = sq - mean * mean;
            expected += (4.0 * var + cfg.c) / (5.0 * var + cfg.c);
        }
    }
    expected /= 4.0;
    let got = si(&x, &y, &cfg).unwrap().value;
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn loss_si_ignores_constant_offsets() {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in [0.0f32, 0.1, 0.7] {
        let data: Vec<f32> = (0..24 * 24).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = GradientMap::new(24, 24, data.clone()).unwrap();
        let b = GradientMap::new(24, 24, data.iter().map(|v| v + k).collect()).unwrap();
        let l = loss_si(&a, &b, &cfg).unwrap().value;
        assert!(l.abs() < 1e-5, "offset {k}: loss {l}");
    }
}

#[test]
fn l1_matches_an_explicit_loop() {
    let a = ImagePlane::constant(16, 16, 3, 0.2).unwrap();
    let b = ImagePlane::constant(16, 16, 3, 0.5).unwrap();
    assert!((l1_loss(&a, &b).unwrap().value - 0.3).abs() < 1e-7);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_image(13, 17, 3, 0.0, 1.0, &mut rng);
    let y = random_image(13, 17, 3, 0.0, 1.0, &mut rng);
    let mut sum = 0.0f64;
    for c in 0..3 {
        for i in 0..13 {
            for j in 0..17 {
                sum += (x.get(c, i, j) as f64 - y.get(c, i, j) as f64).abs();
            }
        }
    }
    let expected = sum / (3 * 13 * 17) as f64;
    assert!((l1_loss(&x, &y).unwrap().value - expected).abs() < 1e-9);
}

#[test]
fn losses_stay_in_range() {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = random_image(16, 16, 3, 0.0, 1.0, &mut rng);
        let y = random_image(16, 16, 3, 0.0, 1.0, &mut rng);
        let l = loss_ssim(&x, &y, &cfg).unwrap().value;
        assert!((0.0..=2.0).contains(&l));
        let inverted = ImagePlane::new(16, 16, 3, x.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let l = loss_ssim(&x, &inverted, &cfg).unwrap().value;
        assert!((0.0..=2.0).contains(&l) && l > 1.0, "{l}");
    }
}

#[test]
fn total_loss_gradient_decomposes() {
    let cfg = SsimConfig::default();
    let w = LossWeights::default();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = random_image(16, 16, 3, 0.0, 1.0, &mut rng);
    let bp = random_image(16, 16, 3, 0.0, 1.0, &mut rng);
    let r = random_image(16, 16, 3, 0.0, 1.0, &mut rng);
    let rp = random_image(16, 16, 3, 0.0, 1.0, &mut rng);
    let g = GradientMap::new(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
    let gp = GradientMap::new(16, 16, (0..256).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();

    let total = total_loss(&b, &bp, &r, &rp, &g, &gp, &w, &cfg).unwrap();
    let s = loss_ssim(&b, &bp, &cfg).unwrap();
    let l = l1_loss(&b, &bp).unwrap();
    for (i, &got) in total.grad_background.iter().enumerate() {
        let want = w.gamma * s.grad[i] + l.grad[i];
        assert!((got - want).abs() < 1e-12, "index {i}: {got} vs {want}");
    }
    let t = total.terms;
    let combined = w.combine(t.ssim_b, t.l1_b, t.ssim_r, t.si_grad);
    assert!((t.total - combined).abs() < 1e-12);
    let sr = loss_ssim(&r, &rp, &cfg).unwrap();
    for (got, want) in total.grad_reflection.iter().zip(&sr.grad) {
        assert!((got - want).abs() < 1e-12);
    }
}

#[test]
fn regional_ignores_differences_outside_the_mask_windows() {
    let cfg = SsimConfig::default();
    let r = cfg.radius();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (h, w) = (40, 48);
    let x = random_image(h, w, 3, 0.0, 1.0, &mut rng);
    let inside = |i: usize, j: usize| (12..20).contains(&i) && (14..26).contains(&j);
    let mask = RegionMask::new(h, w, (0..h * w).map(|p| inside(p / w, p % w)).collect()).unwrap();
    // Every window centred in the mask sees only pixels within `r` of it.
    let reach = mask.dilate(r);
    let mut data = x.data().to_vec();
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                if !reach.get(i, j) {
                    data[(c * h + i) * w + j] = rng.gen_range(0.0..1.0);
                }
            }
        }
    }
    let y = ImagePlane::new(h, w, 3, data).unwrap();
    for kind in [MetricKind::Ssim, MetricKind::Si] {
        let v = regional(&x, &y, &mask, kind, &cfg).unwrap();
        assert!((v - 1.0).abs() < 1e-12, "{kind:?}: {v}");
    }
    assert!(ssim(&x, &y, &cfg).unwrap().value < 0.99);
}

#[test]
fn evaluate_pair_scores() {
    let cfg = SsimConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let b = random_image(32, 32, 3, 0.0, 0.7, &mut rng);
    let r = random_image(32, 32, 3, 0.0, 1.0, &mut rng);
    let i = ImagePlane::new(32, 32, 3, b.data().iter().zip(r.data()).map(|(b, r)| 0.8 * b + 0.3 * r).collect()).unwrap();
    let mask = RegionMask::filled(32, 32, true);

    let perfect = evaluate_pair("x", &i, &b, &b, &mask, &cfg).unwrap();
    assert_eq!(perfect.values(), [1.0; 4]);

    let baseline = evaluate_pair("x", &i, &b, &i, &mask, &cfg).unwrap();
    for v in baseline.values() {
        assert!((-1.0..1.0).contains(&v), "{v}");
    }
}
