//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line, even when it passes.

mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use common::*;
use projection_regret::cli::{run, RunConfig};
use projection_regret::consistency::{
    cd_loss_with, cm_loss_with, consistency_forward, consistency_loss_grad, CmDraws, ConsistencyModel,
};
use projection_regret::diffusion::{dsm_loss_grad, dsm_loss_with, karras_schedule, DenoiserModel, DsmDraws, LossWeighting};
use projection_regret::distances::{cosine_sq_distance, dist_unet, Distance, FeatureExtractor, Metric, MetricContext, SquaredL2};
use projection_regret::evaluation::auroc;
use projection_regret::mock::ClosureDenoiser;
use projection_regret::network::Params;
use projection_regret::projection::CmFull;
use projection_regret::rng::{seeded, NoiseKey, Role};
use projection_regret::scoring::{score_msma, score_pr, score_projection};
use projection_regret::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "acceptance/toy_benchmark.rs"]
mod toy_benchmark;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let s = karras_schedule(17, 0.002, 80.0, 7.0).map_err(|e| e.to_string())?;
    let detail = format!("t_0={} t_17={} t_7={:.4} t_3={:.4}", s.t(0), s.t(17), s.t(7), s.t(3));
    check(
        s.t(0) == 0.002 && s.t(17) == 80.0 && (s.t(7) - 1.09).abs() <= 0.01 && (s.t(3) - 0.06).abs() <= 0.005,
        detail,
    )
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..=200);
        let m = rng.random_range(1..=200);
        let levels = rng.random_range(2..400);
        let id: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 * 0.25).collect();
        let ood: Vec<f64> = (0..m).map(|_| rng.random_range(0..levels) as f64 * 0.25 + 1.0).collect();
        let a = auroc(&id, &ood).map_err(|e| e.to_string())?;
        worst = worst.max((a - brute_auroc(&id, &ood)).abs());
    }
    check(worst <= 1e-12, format!("max |rank - pairwise| = {:e} over 200 pairs", worst))
}

fn criterion_3() -> Outcome {
    let cm = ConsistencyModel::new(&small_unet(3, 8, 3), 0.5, schedule()).map_err(|e| e.to_string())?;
    let t0 = cm.schedule.t(0);
    let mut worst = 0.0f64;
    for k in 0..100 {
        let x = random_images(&[1, 3, 8, 8], 1000 + k);
        let f = consistency_forward(&cm, &x, t0).map_err(|e| e.to_string())?;
        for (a, b) in f.data().iter().zip(x.data()) {
            worst = worst.max((*a as f32 - *b as f32).abs() as f64);
        }
    }
    check(worst < 1e-6, format!("max |f(x, t_0) - x| = {:e} over 100 inputs", worst))
}

/// Largest relative error between an analytic gradient and central
/// differences of `loss` over every parameter.
fn grad_check(params: &Params, analytic: &[Tensor], loss: impl Fn(&Params) -> f64) -> f64 {
    let flat = params.flatten();
    let grad: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..flat.len() {
        let mut p = flat.clone();
        p[k] = flat[k] + h;
        let up = loss(&params.with_flat(&p).unwrap());
        p[k] = flat[k] - h;
        let down = loss(&params.with_flat(&p).unwrap());
        let numeric = (up - down) / (2.0 * h);
        let scale = grad[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grad[k] - numeric).abs() / scale);
    }
    worst
}

/// Perturbs every parameter so no gradient is structurally zero.
fn jitter(p: &Params, seed: u64, scale: f64) -> Params {
    let flat = p.flatten();
    let noise = NoiseKey::new(seed, 0, 0, Role::Misc, 0).gaussian(flat.len());
    let v: Vec<f64> = flat.iter().zip(&noise).map(|(a, n)| a + scale * n).collect();
    p.with_flat(&v).unwrap()
}

fn criterion_4() -> Outcome {
    let res = 8;
    let cfg = micro_unet(1, res, 4);
    let mut den = DenoiserModel::new(&cfg, 0.5, schedule()).map_err(|e| e.to_string())?;
    den.params = jitter(&den.params, 1, 0.05);
    let n_params = den.params.count();
    if n_params > 5000 {
        return Err(format!("{} parameters, above the 5k budget", n_params));
    }
    let batch = random_images(&[2, 1, res, res], 5);
    let mut rng = seeded(6);
    let draws = DsmDraws::sample(&batch, &den.schedule, &mut rng);
    let (_, g) = dsm_loss_grad(&den, &den.params, &batch, &draws, LossWeighting::Unweighted).map_err(|e| e.to_string())?;
    let dsm = grad_check(&den.params, &g, |p| {
        let mut m = den.clone();
        m.params = p.clone();
        dsm_loss_with(&m, &batch, &draws, LossWeighting::Unweighted, 0.5).unwrap()
    });

    let mut online = ConsistencyModel::new(&cfg, 0.5, schedule()).map_err(|e| e.to_string())?;
    online.params = jitter(&online.params, 2, 0.05);
    let mut target = online.clone();
    target.params = jitter(&online.params, 3, 0.02);
    let draws = CmDraws::fixed(vec![3, 9], Tensor::from_vec(batch.shape(), NoiseKey::new(7, 0, 0, Role::Misc, 0).gaussian(batch.len())).unwrap());
    let with = |p: &Params| {
        let mut m = online.clone();
        m.params = p.clone();
        m
    };
    let (_, g) = consistency_loss_grad(&online, &online.params, &target.params, None, &batch, &draws, &SquaredL2)
        .map_err(|e| e.to_string())?;
    let cm = grad_check(&online.params, &g, |p| cm_loss_with(&with(p), &target, &batch, &draws, &SquaredL2).unwrap());
    let (_, g) = consistency_loss_grad(&online, &online.params, &target.params, Some(&den), &batch, &draws, &SquaredL2)
        .map_err(|e| e.to_string())?;
    let cd = grad_check(&online.params, &g, |p| cd_loss_with(&with(p), &target, &den, &batch, &draws, &SquaredL2).unwrap());

    let worst = dsm.max(cm).max(cd);
    check(
        worst < 1e-4,
        format!("{} params; max rel err dsm {:.2e} cm {:.2e} cd {:.2e}", n_params, dsm, cm, cd),
    )
}

fn criterion_5() -> Outcome {
    let cm = ConsistencyModel::new(&tiny_unet(1, 8, 5), 0.5, schedule()).map_err(|e| e.to_string())?;
    let p = CmFull(&cm);
    let x = random_images(&[2, 1, 8, 8], 9);
    let ids = [3u64, 8];
    let mut worst = 0.0f64;
    for na in [1, 2, 4] {
        for nb in [1, 2, 4] {
            let got = score_pr(&p, &x, &ids, 11, 8, 7, na, nb, &SquaredL2).map_err(|e| e.to_string())?;
            for r in 0..2 {
                let want = nested_loop_pr(&p, &SquaredL2, &x.row_tensor(r), ids[r], 11, 8, 7, na, nb);
                worst = worst.max((got[r] - want).abs());
            }
        }
    }
    check(worst < 1e-6, format!("max |batched - nested| = {:e} over n_alpha, n_beta in {{1,2,4}}", worst))
}

fn criterion_6() -> Outcome {
    let cm = ConsistencyModel::new(&small_unet(3, 8, 6), 0.5, schedule()).map_err(|e| e.to_string())?;
    let p = CmFull(&cm);
    let x = random_images(&[1, 3, 8, 8], 10);
    let n = 1000;
    let got = score_projection(&p, &x, &[0], 12, 0, &SquaredL2, n).map_err(|e| e.to_string())?[0];
    let d = x.len() as f64;
    let t0 = cm.schedule.t(0);
    let want = t0 * t0 * d;
    // ‖t_0 z‖² = t_0²·χ²_D, whose variance is 2D·t_0⁴
    let se = t0 * t0 * (2.0 * d / n as f64).sqrt();
    let z = (got - want) / se;
    check(z.abs() <= 3.0, format!("score {:.4e} vs t_0^2 D = {:.4e} ({:+.2} SE)", got, want, z))
}

fn criterion_7() -> Outcome {
    let s = schedule();
    let den = ClosureDenoiser::new(s.clone(), |x, _| Ok(x.clone()));
    let x = random_images(&[1, 3, 8, 8], 11);
    let d = x.len() as f64;
    let n = 500;
    let indices = [1, 3, 5, 7, 9, 12];
    let v = score_msma(&den, &x, &[0], 13, &indices, n).map_err(|e| e.to_string())?;
    let sigma = (2.0 * d / n as f64).sqrt();
    let zs: Vec<f64> = v[0].iter().map(|e| (e - d) / sigma).collect();
    let worst = zs.iter().fold(0.0f64, |a, z| a.max(z.abs()));
    check(
        worst <= 3.0,
        format!("D = {}; per-index z-scores {:?}", d, zs.iter().map(|z| (z * 100.0).round() / 100.0).collect::<Vec<_>>()),
    )
}

fn criterion_8() -> Outcome {
    let cm = Arc::new(ConsistencyModel::new(&small_unet(3, 8, 8), 0.5, schedule()).map_err(|e| e.to_string())?);
    let ctx = MetricContext {
        in_channels: 3,
        resolution: 8,
        extractor: Some(FeatureExtractor::default_for(3, 8).map_err(|e| e.to_string())?),
        consistency: Some(cm.clone()),
        gamma: Some(3),
        n_z: Some(1),
    };
    let n = 500;
    let x = random_images(&[n, 3, 8, 8], 20);
    let y = random_images(&[n, 3, 8, 8], 21);
    let keys: Vec<NoiseKey> = (0..n as u64).map(|r| NoiseKey::new(4, r, 0, Role::Misc, 0)).collect();
    let mut notes = Vec::new();
    let mut ok = true;
    for name in ["l2", "ssim", "perceptual", "unet"] {
        let m = Metric::from_name(name, &ctx).map_err(|e| e.to_string())?;
        let xy = m.distance(&x, &y, &keys).map_err(|e| e.to_string())?;
        let yx = m.distance(&y, &x, &keys).map_err(|e| e.to_string())?;
        let xx = m.distance(&x, &x, &keys).map_err(|e| e.to_string())?;
        let asym = xy.iter().zip(&yx).fold(0.0f64, |a, (p, q)| a.max((p - q).abs()));
        let self_max = xx.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let neg = xy.iter().filter(|v| **v < 0.0).count();
        ok &= asym <= 1e-12 && self_max == 0.0 && neg == 0;
        notes.push(format!("{}: asym {:.1e} self {:.1e} neg {}", name, asym, self_max, neg));
    }
    let unet_self = dist_unet(&cm, &x, &x, 3, 2, &keys).map_err(|e| e.to_string())?;
    ok &= unet_self.iter().all(|v| *v == 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cos_ok = true;
    for _ in 0..500 {
        let u: Vec<f64> = (0..rng.random_range(1..64)).map(|_| rng.random_range(-10.0..10.0)).collect();
        if u.iter().all(|v| *v == 0.0) {
            continue;
        }
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        cos_ok &= cosine_sq_distance(&u, &neg).map_err(|e| e.to_string())? == 4.0;
    }
    ok &= cos_ok;
    notes.push(format!("unet(x,x)==0: {}; cos(u,-u)==4: {}", unet_self.iter().all(|v| *v == 0.0), cos_ok));
    check(ok, notes.join("; "))
}

fn criterion_10() -> Outcome {
    let cm = ConsistencyModel::new(&tiny_unet(1, 8, 10), 0.5, schedule()).map_err(|e| e.to_string())?;
    let p = CmFull(&cm);
    let x = random_images(&[1, 1, 8, 8], 30);
    let runs = 200;
    let ns = [1usize, 4, 16, 64];
    let mut pts = Vec::new();
    for &n in &ns {
        let mut v = Vec::with_capacity(runs);
        for seed in 0..runs as u64 {
            v.push(score_projection(&p, &x, &[0], 1000 + seed, 8, &SquaredL2, n).map_err(|e| e.to_string())?[0]);
        }
        let mean = v.iter().sum::<f64>() / runs as f64;
        let sd = (v.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (runs - 1) as f64).sqrt();
        pts.push(((n as f64).ln(), sd.ln()));
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    check((slope + 0.5).abs() <= 0.1, format!("log-log slope {:.3} over n in {:?}", slope, ns))
}

fn base_config(out: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("resolution", "8"),
        ("toy_samples_per_class", "12"),
        ("batch_size", "4"),
        ("steps", "3"),
        ("n_alpha", "2"),
        ("n_beta", "2"),
        ("n_proj", "2"),
        ("ensemble", "8:7,8:8"),
        ("grid", "8:7,9:8"),
        ("out", out.to_str().unwrap()),
    ] {
        c.set(k, v).unwrap();
    }
    c
}

/// Runs every command into `root` and returns each CSV relative to it.
fn cli_pass(root: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let e = |x: projection_regret::Error| x.to_string();
    let with = |sub: &str, extra: &[(&str, String)]| {
        let mut c = base_config(&root.join(sub));
        for (k, v) in extra {
            c.set(k, v).unwrap();
        }
        c
    };
    let den = root.join("den").to_str().unwrap().to_string();
    let cm = root.join("cm").to_str().unwrap().to_string();
    run("train-diffusion", &with("den", &[("data", "toy:0,1:0..8".into())])).map_err(e)?;
    run("distill", &with("cm", &[("data", "toy:0,1:0..8".into()), ("denoiser", den.clone())])).map_err(e)?;
    let scoring = |sub: &str, data: &str, method: &str| {
        with(sub, &[("data", data.into()), ("model", cm.clone()), ("method", method.into())])
    };
    run("score", &scoring("score_id", "toy:0,1:8..10", "pr")).map_err(e)?;
    run("score", &scoring("score_ood", "toy:2:8..12", "pr-ensemble")).map_err(e)?;
    let mut msma = scoring("score_msma", "toy:2:8..12", "msma");
    msma.set("denoiser", &den).unwrap();
    msma.set("msma_fit_data", "toy:0,1:0..8").unwrap();
    run("score", &msma).map_err(e)?;
    run(
        "evaluate",
        &with(
            "eval",
            &[
                ("model", cm.clone()),
                ("method", "proj".into()),
                ("id_data", "toy:0,1:8..12".into()),
                ("ood_data", "toy:2:8..12".into()),
            ],
        ),
    )
    .map_err(e)?;
    let sid = root.join("score_id/scores.prtc").to_str().unwrap().to_string();
    let sood = root.join("score_ood/scores.prtc").to_str().unwrap().to_string();
    run("evaluate", &with("eval_files", &[("id_scores", sid), ("ood_scores", sood)])).map_err(e)?;
    run(
        "sweep",
        &with(
            "sweep",
            &[
                ("model", cm.clone()),
                ("denoiser", den.clone()),
                ("variants", "cm-l2,single-l2".into()),
                ("id_data", "toy:0,1:8..10".into()),
                ("ood_data", "toy:2:8..10".into()),
            ],
        ),
    )
    .map_err(e)?;
    run("select-hparams", &with("select", &[("model", cm.clone()), ("data", "toy:0,1:8..10".into())])).map_err(e)?;

    let mut csvs = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|x| x.to_string())? {
            let p = entry.map_err(|x| x.to_string())?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv") {
                let rel = p.strip_prefix(root).unwrap().to_str().unwrap().to_string();
                csvs.push((rel, fs::read(&p).map_err(|x| x.to_string())?));
            }
        }
    }
    csvs.sort();
    Ok(csvs)
}

fn criterion_11() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = cli_pass(&tmp.path().join("a"))?;
    let b = cli_pass(&tmp.path().join("b"))?;
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    let same = a == b;
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let expected = ["train_log.csv", "scores.csv", "metrics.csv", "sweep.csv", "selection.csv"];
    let covered = expected.iter().all(|e| names.iter().any(|n| n.ends_with(e)));
    check(
        same && covered && a.len() >= 10,
        format!("{} CSVs compared, differing: {:?}", a.len(), differing),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(u32, &str, fn() -> Outcome)> = vec![
        (1, "schedule anchors", criterion_1),
        (2, "AUROC equals pairwise oracle", criterion_2),
        (3, "consistency boundary condition", criterion_3),
        (4, "gradient checks", criterion_4),
        (5, "batched Projection Regret equals nested loops", criterion_5),
        (6, "analytic projection score at t_0", criterion_6),
        (7, "multiscale residual anchor", criterion_7),
        (8, "distance axioms", criterion_8),
        (9, "toy benchmark ordering", toy_benchmark::run),
        (10, "estimator variance law", criterion_10),
        (11, "CLI reproducibility", criterion_11),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || *p == n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {:>2} PASS  {} ({:.1}s): {}", n, name, secs, d),
            Err(d) => {
                failed += 1;
                println!("criterion {:>2} FAIL  {} ({:.1}s): {}", n, name, secs, d);
            }
        }
    }
    if failed > 0 {
        println!("{} criteria failed", failed);
        std::process::exit(1);
    }
}
