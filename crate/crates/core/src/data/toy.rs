//! Synthetic "shapes on textures" images.
//!
//! Each image is a band-limited noise texture picked from a shared pool with
//! an anti-aliased foreground shape on top. The shape kind is the semantic
//! label; the texture is the background label. Because every semantic class
//! draws from the same texture pool, a held-out class differs from the others
//! only in its foreground.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::{NoiseKey, Role};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToySpec {
    pub resolution: usize,
    pub n_semantic_classes: usize,
    pub n_background_textures: usize,
    pub samples_per_class: usize,
    pub seed: u64,
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::InvalidArgument(format!(
                "toy resolution {} < 8",
                self.resolution
            )));
        }
        if self.n_semantic_classes == 0 || self.n_background_textures == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument("toy counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ToyDataset {
    pub images: ImageBatch,
    pub semantic_labels: Vec<usize>,
    pub background_labels: Vec<usize>,
}

impl ToyDataset {
    /// Images whose semantic label is in `classes`, in dataset order.
    pub fn classes(&self, classes: &[usize]) -> ImageBatch {
        let idx: Vec<usize> = self
            .semantic_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| classes.contains(l))
            .map(|(i, _)| i)
            .collect();
        self.images.select(&idx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Plus,
    Triangle,
    Ring,
    Diamond,
}

const KINDS: [ShapeKind; 6] = [
    ShapeKind::Disk,
    ShapeKind::Square,
    ShapeKind::Plus,
    ShapeKind::Triangle,
    ShapeKind::Ring,
    ShapeKind::Diamond,
];

pub fn shape_kind(class: usize) -> ShapeKind {
    KINDS[class % KINDS.len()]
}

impl ShapeKind {
    /// Membership test in shape-local coordinates (unit scale, y down).
    fn contains(self, u: f64, v: f64, aspect: f64) -> bool {
        let (u, v) = (u / aspect, v * aspect);
        match self {
            ShapeKind::Disk => u * u + v * v <= 1.0,
            ShapeKind::Square => u.abs().max(v.abs()) <= 0.82,
            ShapeKind::Plus => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            ShapeKind::Triangle => {
                // apex up at (0, -1), base at v = 0.6
                v <= 0.6 && v >= -1.0 && u.abs() <= (v + 1.0) * 0.55
            }
            ShapeKind::Ring => {
                let r2 = u * u + v * v;
                (0.36..=1.0).contains(&r2)
            }
            ShapeKind::Diamond => u.abs() + v.abs() <= 1.1,
        }
    }
}

/// Per-image contrast varies within `[1/CONTRAST_SPREAD, CONTRAST_SPREAD]`
/// times the texture's own contrast.
const CONTRAST_SPREAD: f64 = 3.0;

struct Texture {
    tint: [f64; 3],
    mix: [f64; 3],
    contrast: f64,
    freq_lo: f64,
    freq_hi: f64,
    angle: f64,
    spread: f64,
}

impl Texture {
    fn new(seed: u64, index: usize) -> Texture {
        let mut rng = NoiseKey::new(seed, index as u64, 0, Role::Misc, 0).rng();
        let tint = [
            rng.random_range(-0.45..0.45),
            rng.random_range(-0.45..0.45),
            rng.random_range(-0.45..0.45),
        ];
        let mix = [
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
            rng.random_range(0.4..1.0),
        ];
        let freq_lo = rng.random_range(1.5..5.0);
        Texture {
            tint,
            mix,
            contrast: rng.random_range(0.1..0.4),
            freq_lo,
            freq_hi: freq_lo + rng.random_range(1.0..3.0),
            angle: rng.random_range(0.0..std::f64::consts::PI),
            spread: rng.random_range(0.2..1.6),
        }
    }

    /// Renders one realisation into planar `3 × res × res` storage.
    fn render(&self, rng: &mut ChaCha8Rng, res: usize, out: &mut [f64]) {
        // busy and quiet realisations of the same texture, log-uniform gain
        let gain = (rng.random_range(-1.0..=1.0f64) * CONTRAST_SPREAD.ln()).exp();
        const WAVES: usize = 6;
        let mut waves = Vec::with_capacity(WAVES);
        for _ in 0..WAVES {
            let f = rng.random_range(self.freq_lo..self.freq_hi);
            let a = self.angle + rng.random_range(-self.spread..self.spread);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            waves.push((f * a.cos(), f * a.sin(), phase));
        }
        let norm = gain * self.contrast / (WAVES as f64 / 2.0).sqrt();
        let n = res * res;
        for y in 0..res {
            for x in 0..res {
                let (fx, fy) = (x as f64 / res as f64, y as f64 / res as f64);
                let s: f64 = waves
                    .iter()
                    .map(|(kx, ky, p)| (std::f64::consts::TAU * (kx * fx + ky * fy) + p).sin())
                    .sum::<f64>()
                    * norm;
                for c in 0..3 {
                    out[c * n + y * res + x] = self.tint[c] + self.mix[c] * s;
                }
            }
        }
    }
}

/// Generates `n_semantic_classes × samples_per_class` RGB images, class-major.
/// Background labels cycle through the texture pool within each class.
pub fn gen_toy_dataset(spec: &ToySpec) -> Result<ToyDataset> {
    spec.validate()?;
    let res = spec.resolution;
    let n = res * res;
    let textures: Vec<Texture> = (0..spec.n_background_textures)
        .map(|k| Texture::new(spec.seed, k))
        .collect();
    let total = spec.n_semantic_classes * spec.samples_per_class;
    let mut data = vec![0.0; total * 3 * n];
    let mut semantic = Vec::with_capacity(total);
    let mut background = Vec::with_capacity(total);
    const SS: usize = 4;
    for class in 0..spec.n_semantic_classes {
        let kind = shape_kind(class);
        for s in 0..spec.samples_per_class {
            let idx = semantic.len();
            let bg = s % spec.n_background_textures;
            let mut rng = NoiseKey::new(spec.seed, idx as u64, 1, Role::Misc, 0).rng();
            let img = &mut data[idx * 3 * n..(idx + 1) * 3 * n];
            textures[bg].render(&mut rng, res, img);

            let rf = res as f64;
            let radius = rng.random_range(0.26..0.34) * rf;
            let cx = rf / 2.0 + rng.random_range(-0.06..0.06) * rf;
            let cy = rf / 2.0 + rng.random_range(-0.06..0.06) * rf;
            let aspect = rng.random_range(0.9..1.1);
            let lum = if rng.random_bool(0.5) { 0.85 } else { -0.85 };
            let color = [
                lum + rng.random_range(-0.15..0.15),
                lum + rng.random_range(-0.15..0.15),
                lum + rng.random_range(-0.15..0.15),
            ];
            for y in 0..res {
                for x in 0..res {
                    let mut hits = 0;
                    for sy in 0..SS {
                        for sx in 0..SS {
                            let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                            let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                            if kind.contains((px - cx) / radius, (py - cy) / radius, aspect) {
                                hits += 1;
                            }
                        }
                    }
                    let cov = hits as f64 / (SS * SS) as f64;
                    if cov > 0.0 {
                        for c in 0..3 {
                            let p = &mut img[c * n + y * res + x];
                            *p = *p * (1.0 - cov) + color[c] * cov;
                        }
                    }
                }
            }
            img.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            semantic.push(class);
            background.push(bg);
        }
    }
    let images = ImageBatch::new(Tensor::from_vec(&[total, 3, res, res], data)?)?;
    Ok(ToyDataset {
        images,
        semantic_labels: semantic,
        background_labels: background,
    })
}
