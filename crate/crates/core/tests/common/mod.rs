#![allow(dead_code)]

use std::path::{Path, PathBuf};

use crrn::cli::CliConfig;
use crrn::image_model::{ImagePlane, Resolution};
use crrn::synthesis::procedural::{write_pool, PoolKind};
use crrn::synthesis::{generate_dataset, DatasetManifest, SynthesisConfig};
use crrn::training::TrainConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The checked-in desk configuration.
pub fn desk() -> CliConfig {
    CliConfig::load(&workspace_root().join("configs/desk.json")).expect("configs/desk.json")
}

/// Procedural pools plus a dataset generated from them, as `crrn synth`
/// with `generate_pools` would.
pub fn synth_with_pools(cfg: &SynthesisConfig, pools: usize, pool_res: Resolution, out: &Path) -> DatasetManifest {
    let (bg, rf) = (out.join("pools/background"), out.join("pools/reflection"));
    write_pool(&bg, PoolKind::Background, pools, pool_res, cfg.seed).unwrap();
    write_pool(&rf, PoolKind::Reflection, pools, pool_res, cfg.seed.wrapping_add(1)).unwrap();
    generate_dataset(cfg, &bg, &rf, out).unwrap()
}

pub fn desk_dataset(out: &Path) -> DatasetManifest {
    let d = desk();
    synth_with_pools(
        &d.synthesis,
        d.pools.generate_pools.expect("desk config generates pools"),
        d.pools.pool_resolution,
        out,
    )
}

/// A small configuration for tests that only need training to run.
pub fn tiny_train_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        stage1_epochs: 2,
        joint_epochs_a: 1,
        joint_epochs_b: 1,
        batch_size: 2,
        sizes: vec![Resolution { height: 32, width: 32 }],
        seed: 3,
        ..TrainConfig::default()
    };
    cfg.gin.base_channels = 4;
    cfg.iin.base_channels = 4;
    cfg
}

pub fn tiny_synth_config(count: usize) -> SynthesisConfig {
    SynthesisConfig {
        seed: 11,
        count,
        resolutions: vec![Resolution { height: 32, width: 32 }],
        ..SynthesisConfig::default()
    }
}

pub fn random_image(h: usize, w: usize, c: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> ImagePlane {
    ImagePlane::new(h, w, c, (0..h * w * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}
