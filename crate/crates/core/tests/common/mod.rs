//! Independent reference implementations used by the integration tests.
//! Everything here is written the slow, obvious way on purpose.

#![allow(dead_code)]

use projection_regret::diffusion::SigmaSchedule;
use projection_regret::distances::Distance;
use projection_regret::network::UNetConfig;
use projection_regret::projection::Projector;
use projection_regret::rng::{NoiseKey, Role};
use projection_regret::scoring::pair_stream;
use projection_regret::Tensor;

/// A net well under 5k parameters.
pub fn tiny_unet(in_channels: usize, resolution: usize, seed: u64) -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1],
        n_res_blocks_per_stage: 1,
        in_channels,
        resolution,
        seed,
    }
}

/// No residual blocks besides the middle ones; used for exhaustive
/// finite-difference checks.
pub fn micro_unet(in_channels: usize, resolution: usize, seed: u64) -> UNetConfig {
    UNetConfig {
        n_res_blocks_per_stage: 0,
        ..tiny_unet(in_channels, resolution, seed)
    }
}

/// Two stages, still small enough for unit-speed forward passes.
pub fn small_unet(in_channels: usize, resolution: usize, seed: u64) -> UNetConfig {
    UNetConfig {
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        n_res_blocks_per_stage: 1,
        in_channels,
        resolution,
        seed,
    }
}

pub fn random_images(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let key = NoiseKey::new(seed, 0, 0, Role::Misc, 0);
    let v: Vec<f64> = key.gaussian(n).iter().map(|g| (0.5 * g).tanh()).collect();
    Tensor::from_vec(shape, v).unwrap()
}

/// Fraction of (id, ood) pairs with `ood > id`, ties counting one half.
pub fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
    let mut s = 0.0;
    for &a in id {
        for &b in ood {
            if b > a {
                s += 1.0;
            } else if b == a {
                s += 0.5;
            }
        }
    }
    s / (id.len() * ood.len()) as f64
}

/// Best TNR over every admissible threshold. An OOD score is detected when
/// it lies strictly above the threshold and an ID score is kept when it lies
/// at or below it. The TNR only changes at observed scores, so scanning each
/// score and its floating-point predecessor covers every case.
pub fn brute_tnr(id: &[f64], ood: &[f64], tpr: f64) -> f64 {
    let mut cands = vec![f64::NEG_INFINITY];
    for &s in id.iter().chain(ood) {
        cands.push(s);
        cands.push(s.next_down());
    }
    let mut best = 0.0f64;
    for &tau in &cands {
        let detected = ood.iter().filter(|&&s| s > tau).count() as f64 / ood.len() as f64;
        if detected + 1e-12 >= tpr {
            let kept = id.iter().filter(|&&s| s <= tau).count() as f64 / id.len() as f64;
            best = best.max(kept);
        }
    }
    best
}

/// One projection of a single image with the noise of `key`.
pub fn project_one(p: &dyn Projector, x: &Tensor, i: usize, key: NoiseKey) -> Tensor {
    let z = Tensor::from_vec(x.shape(), key.gaussian(x.len())).unwrap();
    p.project(x, i, &z).unwrap()
}

pub fn distance_one(d: &dyn Distance, x: &Tensor, y: &Tensor, key: NoiseKey) -> f64 {
    d.distance(x, y, &[key]).unwrap()[0]
}

/// Projection Regret of one image with explicit nested loops over the same
/// keyed draws the batched scorer uses.
#[allow(clippy::too_many_arguments)]
pub fn nested_loop_pr(
    p: &dyn Projector,
    d: &dyn Distance,
    x: &Tensor,
    id: u64,
    seed: u64,
    alpha: usize,
    beta: usize,
    n_alpha: usize,
    n_beta: usize,
) -> f64 {
    let stream = pair_stream(alpha, beta);
    let key = |role, draw| NoiseKey::new(seed, id, stream, role, draw as u64);
    let mut dx = 0.0;
    for r in 0..n_alpha * n_beta {
        let k = key(Role::Dx, r);
        let px = project_one(p, x, beta, k);
        dx += distance_one(d, x, &px, k);
    }
    dx /= (n_alpha * n_beta) as f64;
    let mut dy = 0.0;
    for j in 0..n_alpha {
        let y = project_one(p, x, alpha, key(Role::Y, j));
        for b in 0..n_beta {
            let k = key(Role::YProj, j * n_beta + b);
            let py = project_one(p, &y, beta, k);
            dy += distance_one(d, &y, &py, k);
        }
    }
    dy /= (n_alpha * n_beta) as f64;
    dx - dy
}

/// Exact solution of `dx/dσ = (1 − c)·x/σ`, the probability-flow ODE of the
/// linear denoiser `D(x, σ) = c·x`.
pub fn linear_ode_exact(x: f64, c: f64, from: f64, to: f64) -> f64 {
    x * (to / from).powf(1.0 - c)
}

/// Forward Euler with `steps` equal substeps on the same ODE.
pub fn linear_ode_euler(x: f64, c: f64, from: f64, to: f64, steps: usize) -> f64 {
    let h = (to - from) / steps as f64;
    let mut v = x;
    let mut s = from;
    for _ in 0..steps {
        v += h * (1.0 - c) * v / s;
        s += h;
    }
    v
}

pub fn schedule() -> SigmaSchedule {
    SigmaSchedule::default()
}
