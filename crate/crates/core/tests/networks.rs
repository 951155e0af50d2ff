mod common;

use common::random_image;
use crrn::gin::{Gin, GinConfig, GinOutput};
use crrn::iin::{feature_extraction_block, FeatureBlock, FeatureVariant, Iin, IinConfig};
use crrn::model::Crrn;
use crrn::nn::{Init, ParamSet};
use crrn::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn conv(cin: usize, cout: usize) -> usize {
    cin * cout * 9 + cout
}

#[test]
fn gin_parameter_count_matches_hand_count() {
    let gin = Gin::new(GinConfig::default(), 0).unwrap();
    let encoder = [
        conv(4, 16) + conv(16, 16),
        conv(16, 32) + conv(32, 32),
        conv(32, 64) + conv(64, 64),
        conv(64, 128) + conv(128, 128),
        conv(128, 128) + conv(128, 128),
    ];
    let decoder = [conv(128, 128), conv(256, 128), conv(256, 64), conv(128, 32), conv(64, 16)];
    let head = conv(32, 1);
    let expected: usize = encoder.iter().sum::<usize>() + decoder.iter().sum::<usize>() + head;
    assert_eq!(expected, 1_225_393);
    assert_eq!(gin.params().count(), expected);
}

#[test]
fn every_encoder_level_feeds_one_mirror_link() {
    let gin = Gin::new(GinConfig::default(), 0).unwrap();
    let links = gin.mirror_links();
    assert_eq!(links, vec![(128, 128), (128, 128), (64, 64), (32, 32), (16, 16)]);
    let mut encoder_sides: Vec<usize> = links.iter().map(|l| l.1).collect();
    encoder_sides.reverse();
    assert_eq!(encoder_sides, GinConfig::default().widths().to_vec());
}

#[test]
fn gin_pyramid_sizes_at_96x160() {
    let cfg = GinConfig { base_channels: 4, ..GinConfig::default() };
    let gin = Gin::new(cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = gin.forward(&random_image(96, 160, 3, 0.0, 1.0, &mut rng)).unwrap();
    let sizes: Vec<_> = out.pyramid.iter().map(|t| (t.shape()[2], t.shape()[3])).collect();
    assert_eq!(sizes, vec![(6, 10), (12, 20), (24, 40), (48, 80), (96, 160)]);
    let channels: Vec<_> = out.pyramid.iter().map(|t| t.shape()[1]).collect();
    assert_eq!(channels, cfg.pyramid_channels().to_vec());
    assert_eq!((out.gradient.height(), out.gradient.width()), (96, 160));
}

#[test]
fn zeroed_branch_writes_zero_channels() {
    for variant in [FeatureVariant::A, FeatureVariant::B] {
        let mut ps = ParamSet::new();
        let block = FeatureBlock::new(&mut ps, "fe", variant, 12, 4, &mut Init::kaiming(2));
        let widths = block.branch_channels();
        let last = block.branch_outputs();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::from_vec([1, 12, 6, 7], (0..12 * 42).map(|_| rng.gen_range(0.0..1.0)).collect());
        for (b, conv) in last.iter().enumerate() {
            let mut zeroed = ps.clone();
            zeroed.tensor_mut(conv.weight).data_mut().fill(0.0);
            zeroed.tensor_mut(conv.bias).data_mut().fill(0.0);
            let out = feature_extraction_block(&block, &zeroed, &input).unwrap();
            assert_eq!(out.shape(), [1, block.out_channels(), 6, 7]);
            let start: usize = widths[..b].iter().sum();
            let plane = 6 * 7;
            let inside = &out.data()[start * plane..(start + widths[b]) * plane];
            assert!(inside.iter().all(|&v| v == 0.0), "{variant:?} branch {b}");
            let outside = out.data()[..start * plane].iter().chain(&out.data()[(start + widths[b]) * plane..]);
            assert!(outside.into_iter().any(|&v| v != 0.0));
        }
    }
}

fn small_model(seed: u64) -> Crrn {
    Crrn::new(
        GinConfig { base_channels: 4, ..GinConfig::default() },
        IinConfig { base_channels: 4, ..IinConfig::default() },
        seed,
    )
    .unwrap()
}

#[test]
fn background_plus_residual_is_the_mixture() {
    let mut model = small_model(5);
    let head = model.iin.residual_head();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for v in model.iin.params_mut().tensor_mut(head.weight).data_mut() {
        *v = rng.gen_range(-0.05..0.05);
    }
    let img = random_image(32, 64, 3, 0.0, 1.0, &mut rng);
    let p = model.predict(&img).unwrap();
    let residual = p.image.residual.data();
    let mut checked = 0;
    for (k, (&b, &i)) in p.background.data().iter().zip(img.data()).enumerate() {
        if b > 0.0 && b < 1.0 {
            assert!((b + residual[k] - i).abs() < 1e-6, "pixel {k}");
            checked += 1;
        }
    }
    assert!(checked > img.data().len() / 2);
    assert!(residual.iter().any(|&r| r.abs() > 1e-3));
}

#[test]
fn unguided_forward_equals_zero_pyramid() {
    let model = small_model(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let img = random_image(64, 32, 3, 0.0, 1.0, &mut rng);
    let guided = model.gin.forward(&img).unwrap();
    let zeros = GinOutput {
        gradient: guided.gradient.clone(),
        pyramid: model.iin.zero_guidance(1, 64, 32),
    };
    let a = model.iin.forward_unguided(&img).unwrap();
    let b = model.iin.forward(&img, &zeros).unwrap();
    assert_eq!(a.background, b.background);
    assert_eq!(a.reflection, b.reflection);
    assert!(a.reflection.data().iter().all(|v| v.is_finite()));
}

#[test]
fn construction_and_inference_are_deterministic() {
    let (a, b) = (small_model(9), small_model(9));
    assert!(a.gin.params().bitwise_eq(b.gin.params()));
    assert!(a.iin.params().bitwise_eq(b.iin.params()));
    assert!(!small_model(10).iin.params().bitwise_eq(a.iin.params()));
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let img = random_image(32, 32, 3, 0.0, 1.0, &mut rng);
    let (pa, pb) = (a.predict(&img).unwrap(), b.predict(&img).unwrap());
    assert_eq!(pa.background, pb.background);
    assert_eq!(pa.reflection, pb.reflection);
    assert_eq!(pa.gradient, pb.gradient);
}

#[test]
fn iin_parameter_groups_are_named() {
    let iin = Iin::new(
        IinConfig { base_channels: 4, ..IinConfig::default() },
        GinConfig { base_channels: 4, ..GinConfig::default() }.pyramid_channels(),
        0,
    )
    .unwrap();
    assert!(iin.params().names().iter().all(|n| n.starts_with("iin.")));
    let [a, b] = iin.feature_blocks();
    assert_eq!(b.in_channels, a.out_channels());
}
