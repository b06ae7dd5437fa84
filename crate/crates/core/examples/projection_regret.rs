//! Scores held-out ID shapes and a novel shape with the plain projection
//! distance and with Projection Regret, single pair and ensemble.

#[path = "shared/mod.rs"]
mod shared;

use projection_regret::distances::FeatureExtractor;
use projection_regret::evaluation::{auroc, build_ensemble_c, tnr_at_tpr, DEFAULT_TPR};
use projection_regret::projection::CmFull;
use projection_regret::scoring::{batch_score, PrConfig, PrScorer, ProjectionScorer, Scorer};

fn main() -> projection_regret::Result<()> {
    let split = shared::toy_split()?;
    let cm = shared::consistency(&split.train)?;
    let projector = CmFull(&cm);
    let perceptual = FeatureExtractor::default_for(3, shared::RES)?;
    let seed = 0;

    let report = |name: &str, scorer: &dyn Scorer| -> projection_regret::Result<()> {
        let id = batch_score(&split.id, scorer, seed)?;
        let ood = batch_score(&split.ood, scorer, seed)?;
        println!(
            "{:<24} AUROC {:.3}  TNR@95 {:.3}",
            name,
            auroc(&id, &ood)?,
            tnr_at_tpr(&id, &ood, DEFAULT_TPR)?
        );
        Ok(())
    };

    report(
        "projection i=7",
        &ProjectionScorer {
            projector: &projector,
            distance: &perceptual,
            index: 7,
            n: 4,
        },
    )?;
    let single = PrConfig {
        alpha: 8,
        beta: 7,
        n_alpha: 4,
        n_beta: 2,
        ensemble: vec![(8, 7)],
    };
    report(
        "regret (8, 7)",
        &PrScorer {
            projector: &projector,
            distance: &perceptual,
            cfg: single.clone(),
            ensemble: false,
        },
    )?;
    let ensemble = PrConfig {
        ensemble: build_ensemble_c((8, 7), 1, 17),
        ..single
    };
    println!("ensemble pairs {:?}", ensemble.ensemble);
    report(
        "regret ensemble",
        &PrScorer {
            projector: &projector,
            distance: &perceptual,
            cfg: ensemble,
            ensemble: true,
        },
    )
}
