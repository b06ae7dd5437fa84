//! Trains a small denoiser on two toy classes, saves it and draws a few
//! samples with the Heun sampler.
//!
//! cargo run --release --example train_diffusion -- /tmp/denoiser 400

use projection_regret::checkpoint::save_denoiser;
use projection_regret::data::save_image_dir;
use projection_regret::data::toy::{gen_toy_dataset, ToySpec};
use projection_regret::data::ImageBatch;
use projection_regret::diffusion::{heun_solve, train_diffusion, Denoiser, DiffusionTrainConfig};
use projection_regret::network::UNetConfig;
use projection_regret::rng::{NoiseKey, Role};
use projection_regret::Tensor;

fn main() -> projection_regret::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "denoiser".into());
    let steps = args.next().map(|s| s.parse().expect("steps")).unwrap_or(400);

    let spec = ToySpec {
        resolution: 16,
        n_semantic_classes: 2,
        n_background_textures: 4,
        samples_per_class: 64,
        seed: 1,
    };
    let train = gen_toy_dataset(&spec)?.images;
    let cfg = DiffusionTrainConfig {
        unet: UNetConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            n_res_blocks_per_stage: 1,
            in_channels: 3,
            resolution: 16,
            seed: 0,
        },
        steps,
        batch_size: 16,
        lr: 1e-3,
        ..Default::default()
    };
    let (model, log) = train_diffusion(&cfg, &train)?;
    for (k, w) in log.losses.chunks(100).enumerate() {
        println!("steps {:4}..{:4}  mean loss {:.4}", k * 100, k * 100 + w.len(), w.iter().sum::<f64>() / w.len() as f64);
    }
    save_denoiser(&out, &model)?;

    let s = model.schedule();
    let n = s.n();
    let z = NoiseKey::new(0, 0, 0, Role::Misc, 0).gaussian(4 * 3 * 16 * 16);
    let x_t = Tensor::from_vec(&[4, 3, 16, 16], z)?.scale(s.t(n));
    let samples = heun_solve(&model, &x_t, n, 0)?;
    save_image_dir(&ImageBatch::new(samples.map(|v| v.clamp(-1.0, 1.0)))?, format!("{}/samples", out), "s")?;
    println!("saved model and 4 samples under {}", out);
    Ok(())
}
