//! Distils a consistency model from a freshly trained denoiser and compares
//! one-step generation against the multi-step teacher.
//!
//! cargo run --release --example distill_consistency -- /tmp/cm 300 300

use projection_regret::checkpoint::save_consistency;
use projection_regret::consistency::{train_consistency, ConsistencyFn, ConsistencyTrainConfig};
use projection_regret::data::toy::{gen_toy_dataset, ToySpec};
use projection_regret::diffusion::{heun_solve, train_diffusion, DiffusionTrainConfig};
use projection_regret::network::UNetConfig;
use projection_regret::rng::{NoiseKey, Role};
use projection_regret::Tensor;

fn main() -> projection_regret::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "cm".into());
    let teacher_steps = args.next().map(|s| s.parse().expect("teacher steps")).unwrap_or(300);
    let student_steps = args.next().map(|s| s.parse().expect("student steps")).unwrap_or(300);

    let spec = ToySpec {
        resolution: 16,
        n_semantic_classes: 2,
        n_background_textures: 4,
        samples_per_class: 64,
        seed: 1,
    };
    let train = gen_toy_dataset(&spec)?.images;
    let unet = UNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        n_res_blocks_per_stage: 1,
        in_channels: 3,
        resolution: 16,
        seed: 0,
    };
    let (teacher, _) = train_diffusion(
        &DiffusionTrainConfig {
            unet: unet.clone(),
            steps: teacher_steps,
            batch_size: 16,
            lr: 1e-3,
            ..Default::default()
        },
        &train,
    )?;
    let cfg = ConsistencyTrainConfig {
        unet,
        steps: student_steps,
        batch_size: 16,
        lr: 1e-3,
        ..Default::default()
    };
    let (cm, log) = train_consistency(&cfg, &train, Some(&teacher))?;
    let tail = &log.losses[log.losses.len().saturating_sub(50)..];
    println!("distillation loss over the last {} steps: {:.4}", tail.len(), tail.iter().sum::<f64>() / tail.len() as f64);
    save_consistency(&out, &cm)?;

    // same starting noise, one network call against 2N teacher calls
    let s = cm.schedule().clone();
    let t = s.t(s.n());
    let z = NoiseKey::new(5, 0, 0, Role::Misc, 0).gaussian(8 * 3 * 16 * 16);
    let x_t = Tensor::from_vec(&[8, 3, 16, 16], z)?.scale(t);
    let one_step = cm.consistency(&x_t, &[t; 8])?;
    let ode = heun_solve(&teacher, &x_t, s.n(), 0)?;
    let gap = one_step.sub(&ode)?.map(|v| v * v).mean().sqrt();
    println!("rms gap between one-step and ODE samples: {:.4}", gap);
    Ok(())
}
