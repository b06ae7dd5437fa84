//! Toy data and quickly trained models shared by the examples. Models are
//! cached under the system temp dir so later examples start instantly.

#![allow(dead_code)]

use std::path::PathBuf;

use projection_regret::checkpoint::{load_consistency, load_denoiser, save_consistency, save_denoiser};
use projection_regret::consistency::{train_consistency, ConsistencyModel, ConsistencyTrainConfig};
use projection_regret::data::toy::{gen_toy_dataset, ToySpec};
use projection_regret::data::ImageBatch;
use projection_regret::diffusion::{train_diffusion, DenoiserModel, DiffusionTrainConfig};
use projection_regret::network::UNetConfig;
use projection_regret::Result;

pub const RES: usize = 16;

pub struct Split {
    pub train: ImageBatch,
    pub id: ImageBatch,
    pub ood: ImageBatch,
}

/// Classes 0 and 1 are in-distribution, class 2 is the novel shape.
pub fn toy_split() -> Result<Split> {
    let (n_train, n_test) = (64, 24);
    let d = gen_toy_dataset(&ToySpec {
        resolution: RES,
        n_semantic_classes: 3,
        n_background_textures: 4,
        samples_per_class: n_train + n_test,
        seed: 11,
    })?;
    let per = n_train + n_test;
    let pick = |classes: &[usize], lo: usize, hi: usize| -> ImageBatch {
        let idx: Vec<usize> = classes.iter().flat_map(|c| (lo..hi).map(move |s| c * per + s)).collect();
        d.images.select(&idx)
    };
    Ok(Split {
        train: pick(&[0, 1], 0, n_train),
        id: pick(&[0, 1], n_train, per),
        ood: pick(&[2], n_train, per),
    })
}

fn unet() -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        n_res_blocks_per_stage: 1,
        in_channels: 3,
        resolution: RES,
        seed: 0,
    }
}

fn cache(name: &str) -> PathBuf {
    std::env::temp_dir().join(format!("projection-regret-examples/{}", name))
}

pub fn denoiser(train: &ImageBatch) -> Result<DenoiserModel> {
    let dir = cache("denoiser");
    if let Ok(m) = load_denoiser(&dir) {
        return Ok(m);
    }
    eprintln!("training a denoiser (cached in {})", dir.display());
    let cfg = DiffusionTrainConfig {
        unet: unet(),
        steps: 600,
        batch_size: 16,
        lr: 1e-3,
        ..Default::default()
    };
    let (m, _) = train_diffusion(&cfg, train)?;
    save_denoiser(&dir, &m)?;
    Ok(m)
}

pub fn consistency(train: &ImageBatch) -> Result<ConsistencyModel> {
    let dir = cache("consistency");
    if let Ok(m) = load_consistency(&dir) {
        return Ok(m);
    }
    let teacher = denoiser(train)?;
    eprintln!("distilling a consistency model (cached in {})", dir.display());
    let cfg = ConsistencyTrainConfig {
        unet: unet(),
        steps: 400,
        batch_size: 16,
        lr: 1e-3,
        ..Default::default()
    };
    let (m, _) = train_consistency(&cfg, train, Some(&teacher))?;
    save_consistency(&dir, &m)?;
    Ok(m)
}
