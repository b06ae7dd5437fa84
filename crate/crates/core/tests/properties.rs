mod common;

use std::sync::Arc;

use common::*;
use projection_regret::consistency::{ConsistencyFn, ConsistencyModel};
use projection_regret::data::{gen_toy_dataset, load_container, rotate_batch, save_container, Array, ArrayData, ImageBatch, ToySpec};
use projection_regret::diffusion::karras_schedule;
use projection_regret::distances::{cosine_sq_distance, Distance, FeatureExtractor, Metric, MetricContext, UnetDistance};
use projection_regret::evaluation::auroc;
use projection_regret::network::{ema_update, Params};
use projection_regret::rng::{NoiseKey, Role};
use projection_regret::Tensor;
use proptest::prelude::*;

fn keys(n: usize) -> Vec<NoiseKey> {
    (0..n).map(|r| NoiseKey::new(9, r as u64, 0, Role::Misc, 0)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedules_increase_strictly(n in 1usize..200, eps in 1e-4f64..0.5, span in 0.01f64..200.0, rho in 1.0f64..12.0) {
        let s = karras_schedule(n, eps, eps + span, rho).unwrap();
        prop_assert_eq!(s.levels().len(), n + 1);
        prop_assert_eq!(s.t(0), eps);
        prop_assert!((s.t(n) - (eps + span)).abs() <= 1e-12 * (eps + span));
        for w in s.levels().windows(2) {
            prop_assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn auroc_ignores_increasing_maps(id in prop::collection::vec(-50i32..50, 1..80),
                                     ood in prop::collection::vec(-50i32..50, 1..80),
                                     a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let f = |v: &i32| (*v as f64 * 0.1 * a + b).exp() + (*v as f64).powi(3);
        let id0: Vec<f64> = id.iter().map(|&v| v as f64).collect();
        let ood0: Vec<f64> = ood.iter().map(|&v| v as f64).collect();
        let id1: Vec<f64> = id.iter().map(f).collect();
        let ood1: Vec<f64> = ood.iter().map(f).collect();
        prop_assert_eq!(auroc(&id0, &ood0).unwrap(), auroc(&id1, &ood1).unwrap());
        prop_assert!((auroc(&id0, &ood0).unwrap() - brute_auroc(&id0, &ood0)).abs() < 1e-12);
    }

    #[test]
    fn auroc_swaps_to_its_complement(id in prop::collection::vec(-1e3f64..1e3, 1..60),
                                     ood in prop::collection::vec(-1e3f64..1e3, 1..60)) {
        let mut all: Vec<f64> = id.iter().chain(&ood).copied().collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        prop_assume!(all.len() == id.len() + ood.len());
        let s = auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap();
        prop_assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_is_affine(t in prop::collection::vec(-5f64..5.0, 12), o in prop::collection::vec(-5f64..5.0, 12), mu in 0f64..=1.0) {
        let p = |v: &[f64]| Params {
            names: vec!["a".into(), "b".into()],
            tensors: vec![Tensor::from_vec(&[3, 2], v[..6].to_vec()).unwrap(), Tensor::from_vec(&[6], v[6..].to_vec()).unwrap()],
        };
        let e = ema_update(&p(&t), &p(&o), mu).unwrap();
        for (k, v) in e.flatten().iter().enumerate() {
            prop_assert!((v - (mu * t[k] + (1.0 - mu) * o[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn container_roundtrip_is_bit_exact(shape in prop::collection::vec(1usize..5, 1..=4), seed in 0u64..1000, dtype in 0u8..3) {
        let n: usize = shape.iter().product();
        let g = NoiseKey::new(seed, 0, 0, Role::Misc, 0).gaussian(n);
        let data = match dtype {
            0 => ArrayData::F32(g.iter().map(|v| *v as f32).collect()),
            1 => ArrayData::F64(g.clone()),
            _ => ArrayData::U8(g.iter().map(|v| (v.abs() * 80.0) as u8).collect()),
        };
        let a = Array::new(&shape, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.prtc");
        save_container(&a, &path).unwrap();
        let back = load_container(&path).unwrap();
        prop_assert_eq!(back.to_bytes(), a.to_bytes());
    }

    #[test]
    fn rotation_permutes_pixels(seed in 0u64..500, k in 0usize..4, res in 2usize..7) {
        let b = ImageBatch::new(random_images(&[2, 3, res, res], seed)).unwrap();
        let r = rotate_batch(&b, k).unwrap();
        let sorted = |t: &Tensor| {
            let mut v = t.data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        prop_assert_eq!(sorted(b.tensor()), sorted(r.tensor()));
        let mut back = r;
        for _ in 0..(4 - k) % 4 {
            back = rotate_batch(&back, 1).unwrap();
        }
        prop_assert_eq!(back.tensor(), b.tensor());
    }

    #[test]
    fn cosine_matches_dot_product_form(u in prop::collection::vec(-3f64..3.0, 1..16), seed in 0u64..100) {
        prop_assume!(u.iter().any(|v| v.abs() > 1e-3));
        let v: Vec<f64> = NoiseKey::new(seed, 0, 0, Role::Misc, 0).gaussian(u.len());
        let d = cosine_sq_distance(&u, &v).unwrap();
        let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let direct: f64 = u.iter().zip(&v).map(|(a, b)| (a / nu - b / nv).powi(2)).sum();
        prop_assert!((d - direct).abs() < 1e-9);
        prop_assert!((0.0..=4.0).contains(&d));
    }
}

fn registered(cm: Arc<ConsistencyModel>) -> Vec<Metric> {
    let ctx = MetricContext {
        in_channels: 1,
        resolution: 8,
        extractor: Some(FeatureExtractor::random(1, 8, &[4, 8], 2, 5).unwrap()),
        consistency: Some(cm),
        gamma: Some(3),
        n_z: Some(2),
    };
    ["l2", "ssim", "perceptual", "unet"]
        .iter()
        .map(|n| Metric::from_name(n, &ctx).unwrap())
        .collect()
}

#[test]
fn every_registered_distance_is_a_premetric() {
    let cm = Arc::new(ConsistencyModel::new(&tiny_unet(1, 8, 2), 0.5, schedule()).unwrap());
    let x = random_images(&[40, 1, 8, 8], 1);
    let y = random_images(&[40, 1, 8, 8], 2);
    let k = keys(40);
    for m in registered(cm) {
        let d = m.as_distance();
        let xy = d.distance(&x, &y, &k).unwrap();
        let yx = d.distance(&y, &x, &k).unwrap();
        let xx = d.distance(&x, &x, &k).unwrap();
        for r in 0..40 {
            assert!(xy[r] >= 0.0, "{}", d.name());
            assert!((xy[r] - yx[r]).abs() < 1e-12, "{}", d.name());
            assert!(xx[r].abs() < 1e-12, "{}", d.name());
        }
    }
}

#[test]
fn unet_distance_matches_a_position_loop() {
    let cm = Arc::new(ConsistencyModel::new(&tiny_unet(1, 8, 6), 0.5, schedule()).unwrap());
    let x = random_images(&[1, 1, 8, 8], 3);
    let y = random_images(&[1, 1, 8, 8], 4);
    let key = NoiseKey::new(2, 5, 1, Role::Dx, 3);
    let got = UnetDistance::new(cm.clone(), 3, 1).unwrap().distance(&x, &y, &[key]).unwrap()[0];

    let t = cm.schedule().t(3);
    let mk = UnetDistance::metric_key(&key, 0, 1);
    let z = Tensor::from_vec(x.shape(), mk.gaussian(x.len())).unwrap();
    let (_, fx) = cm.forward_features(&x.add_scaled(&z, t).unwrap(), &[t]).unwrap();
    let (_, fy) = cm.forward_features(&y.add_scaled(&z, t).unwrap(), &[t]).unwrap();
    let mut want = 0.0;
    for (a, b) in fx.iter().zip(&fy) {
        let (_, c, h, w) = a.dims4().unwrap();
        let mut level = 0.0;
        for i in 0..h {
            for j in 0..w {
                let u: Vec<f64> = (0..c).map(|ch| a.data()[(ch * h + i) * w + j]).collect();
                let v: Vec<f64> = (0..c).map(|ch| b.data()[(ch * h + i) * w + j]).collect();
                let nu = u.iter().map(|p| p * p).sum::<f64>().sqrt();
                let nv = v.iter().map(|p| p * p).sum::<f64>().sqrt();
                level += u.iter().zip(&v).map(|(p, q)| (p / nu - q / nv).powi(2)).sum::<f64>();
            }
        }
        want += level / (h * w) as f64;
    }
    assert!((got - want).abs() < 1e-10, "{} vs {}", got, want);
}

#[test]
fn perceptual_distance_grows_with_noise() {
    let ex = FeatureExtractor::default_for(3, 24).unwrap();
    let x = random_images(&[20, 3, 24, 24], 7);
    let n = random_images(&[20, 3, 24, 24], 8);
    let k = keys(20);
    let ds: Vec<Vec<f64>> = [0.05, 0.1, 0.2]
        .iter()
        .map(|&s| ex.distance(&x, &x.add_scaled(&n, s).unwrap(), &k).unwrap())
        .collect();
    for r in 0..20 {
        assert!(ds[0][r] < ds[1][r] && ds[1][r] < ds[2][r], "row {}: {:?}", r, (ds[0][r], ds[1][r], ds[2][r]));
    }
}

#[test]
fn toy_classes_differ_in_the_foreground_not_the_background() {
    let spec = ToySpec {
        resolution: 24,
        n_semantic_classes: 2,
        n_background_textures: 4,
        samples_per_class: 200,
        seed: 3,
    };
    let d = gen_toy_dataset(&spec).unwrap();
    let (c, r) = (d.images.channels(), spec.resolution);
    let plane = r * r;
    let mean_of = |class: usize| -> Vec<f64> {
        let b = d.classes(&[class]);
        let mut m = vec![0.0; c * plane];
        for i in 0..b.len() {
            // shapes come in both polarities, so compare magnitudes
            for (a, v) in m.iter_mut().zip(b.tensor().row(i)) {
                *a += v.abs() / b.len() as f64;
            }
        }
        m
    };
    let (m0, m1) = (mean_of(0), mean_of(1));
    // shapes stay within 0.3·res of the centre; the border ring is background
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for ch in 0..c {
        for i in 0..r {
            for j in 0..r {
                let p = ch * plane + i * r + j;
                let diff = (m0[p] - m1[p]).abs();
                let edge = i.min(j).min(r - 1 - i).min(r - 1 - j);
                if edge < 2 {
                    bg.push(diff);
                } else if (i as f64 + 0.5 - r as f64 / 2.0).abs().max((j as f64 + 0.5 - r as f64 / 2.0).abs()) < 0.3 * r as f64 {
                    fg.push(diff);
                }
            }
        }
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    assert!(avg(&bg) < avg(&fg), "background {} foreground {}", avg(&bg), avg(&fg));
}
