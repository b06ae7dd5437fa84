//! Toy end-to-end run: distil a consistency model on two shape classes,
//! then compare projection scores against a held-out shape that shares the
//! same backgrounds.

use std::time::Instant;

use projection_regret::consistency::{train_consistency, ConsistencyTrainConfig};
use projection_regret::data::toy::{gen_toy_dataset, ToySpec};
use projection_regret::data::ImageBatch;
use projection_regret::diffusion::{train_diffusion, DiffusionTrainConfig};
use projection_regret::distances::{FeatureExtractor, SquaredL2};
use projection_regret::evaluation::{auroc, build_ensemble_c, sweep_timesteps, SweepVariant};
use projection_regret::network::UNetConfig;
use projection_regret::projection::CmFull;
use projection_regret::scoring::{batch_score, PrConfig, PrScorer};

const RES: usize = 24;
const TRAIN_PER_CLASS: usize = 96;
const TEST_PER_CLASS: usize = 48;
const TEACHER_STEPS: usize = 2000;
const STUDENT_STEPS: usize = 1500;
const SWEEP_DRAWS: usize = 4;
const RADIUS: usize = 2;
const MIN_ENSEMBLE_AUROC: f64 = 0.80;

struct SeedResult {
    l2: (usize, f64),
    perceptual: (usize, f64),
    ensemble: f64,
}

impl SeedResult {
    fn passes(&self) -> bool {
        self.perceptual.1 > self.l2.1 && self.ensemble >= self.perceptual.1 && self.ensemble >= MIN_ENSEMBLE_AUROC
    }
}

fn split(seed: u64) -> projection_regret::Result<(ImageBatch, ImageBatch, ImageBatch)> {
    let per = TRAIN_PER_CLASS + TEST_PER_CLASS;
    let d = gen_toy_dataset(&ToySpec {
        resolution: RES,
        n_semantic_classes: 3,
        n_background_textures: 4,
        samples_per_class: per,
        seed: 100 + seed,
    })?;
    let pick = |classes: &[usize], lo: usize, hi: usize| {
        let idx: Vec<usize> = classes.iter().flat_map(|c| (lo..hi).map(move |s| c * per + s)).collect();
        d.images.select(&idx)
    };
    Ok((
        pick(&[0, 1], 0, TRAIN_PER_CLASS),
        pick(&[0, 1], TRAIN_PER_CLASS, per),
        pick(&[2], TRAIN_PER_CLASS, per),
    ))
}

fn one_seed(seed: u64) -> projection_regret::Result<SeedResult> {
    let (train, id, ood) = split(seed)?;
    let unet = UNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2, 2],
        n_res_blocks_per_stage: 1,
        in_channels: 3,
        resolution: RES,
        seed,
    };
    let clock = Instant::now();
    let (teacher, _) = train_diffusion(
        &DiffusionTrainConfig {
            unet: unet.clone(),
            steps: TEACHER_STEPS,
            batch_size: 16,
            lr: 1e-3,
            seed,
            ..Default::default()
        },
        &train,
    )?;
    let (cm, _) = train_consistency(
        &ConsistencyTrainConfig {
            unet,
            steps: STUDENT_STEPS,
            batch_size: 16,
            lr: 1e-3,
            seed,
            ..Default::default()
        },
        &train,
        Some(&teacher),
    )?;
    eprintln!("  seed {}: trained in {:.0}s", seed, clock.elapsed().as_secs_f64());

    let projector = CmFull(&cm);
    let perceptual = FeatureExtractor::default_for(3, RES)?;
    let variants = [
        SweepVariant { name: "l2".into(), projector: &projector, distance: &SquaredL2 },
        SweepVariant { name: "perceptual".into(), projector: &projector, distance: &perceptual },
    ];
    let table = sweep_timesteps(&variants, &id, &ood, SWEEP_DRAWS, 1)?;
    let l2 = table.best("l2").expect("sweep rows");
    let best_pe = table.best("perceptual").expect("sweep rows");

    // the ensemble sits around the best single perceptual projection
    let centre = (best_pe.0.max(1), best_pe.0.max(1) - 1);
    let scorer = PrScorer {
        projector: &projector,
        distance: &perceptual,
        cfg: PrConfig {
            alpha: centre.0,
            beta: centre.1,
            n_alpha: 4,
            n_beta: 2,
            ensemble: build_ensemble_c(centre, RADIUS, cm.schedule.n()),
        },
        ensemble: true,
    };
    let ensemble = auroc(&batch_score(&id, &scorer, 2)?, &batch_score(&ood, &scorer, 2)?)?;
    eprintln!("  seed {}: evaluated at {:.0}s", seed, clock.elapsed().as_secs_f64());
    Ok(SeedResult { l2, perceptual: best_pe, ensemble })
}

pub fn run() -> super::Outcome {
    let mut lines = Vec::new();
    let mut passed = 0;
    for seed in 0..3 {
        let r = one_seed(seed).map_err(|e| format!("seed {}: {}", seed, e))?;
        passed += r.passes() as usize;
        lines.push(format!(
            "seed {} {}: l2 {:.3}@{} perceptual {:.3}@{} regret-ensemble {:.3}",
            seed,
            if r.passes() { "ok" } else { "miss" },
            r.l2.1,
            r.l2.0,
            r.perceptual.1,
            r.perceptual.0,
            r.ensemble
        ));
        eprintln!("  {}", lines.last().unwrap());
    }
    super::check(passed >= 2, format!("{} of 3 seeds; {}", passed, lines.join("; ")))
}
