//! AUROC of projection scores at every noise level, for several projector
//! and distance combinations. Writes the table as CSV and a line chart.
//!
//! cargo run --release --example timestep_sweep -- /tmp/sweep

#[path = "shared/mod.rs"]
mod shared;

use std::fs;

use projection_regret::distances::{FeatureExtractor, SquaredL2};
use projection_regret::evaluation::{sweep_timesteps, SweepVariant};
use projection_regret::projection::{CmFull, SingleStep};

fn main() -> projection_regret::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "sweep".into());
    let split = shared::toy_split()?;
    let den = shared::denoiser(&split.train)?;
    let cm = shared::consistency(&split.train)?;
    let perceptual = FeatureExtractor::default_for(3, shared::RES)?;
    let (full, single) = (CmFull(&cm), SingleStep(&den));
    let variants = [
        SweepVariant { name: "full-l2".into(), projector: &full, distance: &SquaredL2 },
        SweepVariant { name: "full-perceptual".into(), projector: &full, distance: &perceptual },
        SweepVariant { name: "single-l2".into(), projector: &single, distance: &SquaredL2 },
    ];
    let table = sweep_timesteps(&variants, &split.id, &split.ood, 2, 0)?;
    for v in &variants {
        let (i, a) = table.best(&v.name).expect("non-empty sweep");
        println!("{:<16} best index {:2}  AUROC {:.3}", v.name, i, a);
    }
    fs::create_dir_all(&out).expect("create output dir");
    fs::write(format!("{}/sweep.csv", out), table.to_csv()).expect("write csv");
    fs::write(format!("{}/sweep.svg", out), table.to_svg()).expect("write svg");
    println!("wrote {}/sweep.csv and sweep.svg", out);
    Ok(())
}
