//! Every registered image distance on clean, slightly noisy and unrelated
//! image pairs.

#[path = "shared/mod.rs"]
mod shared;

use std::sync::Arc;

use projection_regret::distances::{Metric, MetricContext};
use projection_regret::rng::{NoiseKey, Role};
use projection_regret::Tensor;

fn main() -> projection_regret::Result<()> {
    let split = shared::toy_split()?;
    let cm = Arc::new(shared::consistency(&split.train)?);
    let ctx = MetricContext {
        in_channels: 3,
        resolution: shared::RES,
        extractor: None,
        consistency: Some(cm),
        gamma: None,
        n_z: Some(4),
    };
    let x = split.id.tensor().select_rows(&[0, 1, 2, 3]);
    let noise = Tensor::from_vec(x.shape(), NoiseKey::new(1, 0, 0, Role::Misc, 0).gaussian(x.len()))?;
    let noisy = x.add_scaled(&noise, 0.1)?;
    let other = split.ood.tensor().select_rows(&[0, 1, 2, 3]);
    let keys: Vec<NoiseKey> = (0..4).map(|r| NoiseKey::new(2, r, 0, Role::Metric, 0)).collect();

    println!("{:<12} {:>10} {:>10} {:>10}", "metric", "self", "noisy", "other");
    for name in ["l2", "ssim", "perceptual", "unet"] {
        let m = Metric::from_name(name, &ctx)?;
        let d = m.as_distance();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        println!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}",
            name,
            mean(d.distance(&x, &x, &keys)?),
            mean(d.distance(&x, &noisy, &keys)?),
            mean(d.distance(&x, &other, &keys)?),
        );
    }
    Ok(())
}
