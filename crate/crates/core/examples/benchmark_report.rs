//! Runs several methods over one task and writes a report directory with
//! per-seed and averaged metrics plus every score vector.
//!
//! cargo run --release --example benchmark_report -- /tmp/report

#[path = "shared/mod.rs"]
mod shared;

use projection_regret::distances::{FeatureExtractor, SquaredL2};
use projection_regret::evaluation::{run_benchmark, BenchmarkSpec, Method, Task};
use projection_regret::projection::CmFull;
use projection_regret::scoring::{PrConfig, PrScorer, ProjectionScorer};

fn main() -> projection_regret::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "report".into());
    let split = shared::toy_split()?;
    let cm = shared::consistency(&split.train)?;
    let projector = CmFull(&cm);
    let perceptual = FeatureExtractor::default_for(3, shared::RES)?;
    let l2 = ProjectionScorer { projector: &projector, distance: &SquaredL2, index: 6, n: 2 };
    let regret = PrScorer {
        projector: &projector,
        distance: &perceptual,
        cfg: PrConfig { alpha: 8, beta: 7, n_alpha: 2, n_beta: 1, ensemble: vec![(8, 7)] },
        ensemble: false,
    };
    let mut methods = Vec::new();
    for seed in [0, 1] {
        methods.push(Method { name: "projection-l2".into(), seed, scorer: &l2, metric: "l2".into(), ensemble: vec![] });
        methods.push(Method { name: "regret".into(), seed, scorer: &regret, metric: "perceptual".into(), ensemble: vec![(8, 7)] });
    }
    let spec = BenchmarkSpec {
        methods,
        tasks: vec![Task { name: "toy-novel-shape".into(), id: split.id, ood: split.ood }],
        config_hash: "example".into(),
        sweeps: vec![],
    };
    let report = run_benchmark(&spec, &out)?;
    for s in &report.summary {
        println!("{:<14} {:<16} AUROC {:.3}  TNR@95 {:.3}  seeds {:?}", s.method, s.task, s.auroc, s.tnr95, s.seeds);
    }
    println!("report in {} ({:.1}s)", report.dir.display(), report.wall_clock_secs);
    Ok(())
}
