//! Chooses the Projection Regret pair without any OOD data: rotated copies
//! of the ID set stand in for novelties. The winner then centres the
//! ensemble.

#[path = "shared/mod.rs"]
mod shared;

use projection_regret::distances::FeatureExtractor;
use projection_regret::evaluation::{build_ensemble_c, select_hparams_rotated};
use projection_regret::projection::CmFull;

fn main() -> projection_regret::Result<()> {
    let split = shared::toy_split()?;
    let cm = shared::consistency(&split.train)?;
    let perceptual = FeatureExtractor::default_for(3, shared::RES)?;
    let grid: Vec<(usize, usize)> = (5..=10).flat_map(|a| [(a, a - 1), (a, a)]).collect();
    // a small validation slice keeps this quick
    let val = split.id.select(&(0..16).collect::<Vec<_>>());
    let (best, table) = select_hparams_rotated(&CmFull(&cm), &perceptual, &val, &grid, 2, 1, 0)?;
    for ((a, b), auroc) in &table {
        println!("({:2}, {:2})  rotation AUROC {:.3}", a, b, auroc);
    }
    println!("selected {:?}", best);
    println!("ensemble {:?}", build_ensemble_c(best, 1, 17));
    Ok(())
}
