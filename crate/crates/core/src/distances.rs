//! Image distances: squared ℓ2, SSIM, a frozen-feature perceptual distance,
//! and the consistency-model U-Net feature distance.
//!
//! All distances act on batches `(B, C, H, W)` and return one value per row.
//! Stochastic distances draw their noise from the per-row [`NoiseKey`]s so a
//! given `(x, y, key)` triple always gives the same value.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Manifest};
use crate::consistency::ConsistencyModel;
use crate::error::{Error, Result};
use crate::network::Params;
use crate::rng::{gaussian_rows, splitmix64, standard_normal_vec, NoiseKey, Role};
use crate::tensor::Tensor;

pub trait Distance: Send + Sync {
    fn name(&self) -> &str;

    /// Per-row distances. `keys` has one entry per row; deterministic metrics
    /// ignore it.
    fn distance(&self, x: &Tensor, y: &Tensor, keys: &[NoiseKey]) -> Result<Vec<f64>>;
}

/// A distance that can be recorded on an autodiff graph, for training.
pub trait GraphDistance: Distance {
    fn distance_graph(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var>;
}

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// `Σ (x − y)²` per sample.
pub fn dist_l2(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    same_shape(x, y)?;
    Ok((0..x.rows())
        .map(|r| x.row(r).iter().zip(y.row(r)).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect())
}

#[derive(Clone, Copy, Debug, Default)]
pub struct SquaredL2;

impl Distance for SquaredL2 {
    fn name(&self) -> &str {
        "l2"
    }

    fn distance(&self, x: &Tensor, y: &Tensor, _keys: &[NoiseKey]) -> Result<Vec<f64>> {
        dist_l2(x, y)
    }
}

impl GraphDistance for SquaredL2 {
    fn distance_graph(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        let d = g.sub(x, y)?;
        g.weighted_sq_sum(d, None, 1.0)
    }
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of pixels in `[-1, 1]`.
pub const SSIM_RANGE: f64 = 2.0;

/// Channel-mean grayscale planes, one `H·W` vector per row.
pub(crate) fn grayscale(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let (b, c, h, w) = t.dims4()?;
    Ok((0..b)
        .map(|r| {
            let row = t.row(r);
            (0..h * w)
                .map(|p| (0..c).map(|ch| row[ch * h * w + p]).sum::<f64>() / c as f64)
                .collect()
        })
        .collect())
}

/// Summed-area table with a zero border, `(h + 1) × (w + 1)`.
fn integral(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut s = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut run = 0.0;
        for x in 0..w {
            run += img[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + run;
        }
    }
    s
}

fn window_sum(s: &[f64], w: usize, y: usize, x: usize, k: usize) -> f64 {
    let stride = w + 1;
    s[(y + k) * stride + x + k] - s[y * stride + x + k] - s[(y + k) * stride + x] + s[y * stride + x]
}

/// Mean SSIM over all valid 7×7 windows of two grayscale planes.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = SSIM_WINDOW;
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (sa, sb, saa, sbb, sab) = (
        integral(a, h, w),
        integral(b, h, w),
        integral(&aa, h, w),
        integral(&bb, h, w),
        integral(&ab, h, w),
    );
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let mx = window_sum(&sa, w, y, x, k) / n;
            let my = window_sum(&sb, w, y, x, k) / n;
            let vx = window_sum(&saa, w, y, x, k) / n - mx * mx;
            let vy = window_sum(&sbb, w, y, x, k) / n - my * my;
            let cxy = window_sum(&sab, w, y, x, k) / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// `−SSIM(x, y)` per sample (7×7 uniform window, population moments).
pub fn dist_neg_ssim(x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    same_shape(x, y)?;
    let (_, _, h, w) = x.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} smaller than the {}x{} SSIM window",
            h, w, SSIM_WINDOW, SSIM_WINDOW
        )));
    }
    let gx = grayscale(x)?;
    let gy = grayscale(y)?;
    Ok(gx.iter().zip(&gy).map(|(a, b)| -ssim_plane(a, b, h, w)).collect())
}

/// Registered SSIM distance, `1 − SSIM`: the negative SSIM shifted so that
/// identical images are at distance zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct SsimDistance;

impl Distance for SsimDistance {
    fn name(&self) -> &str {
        "ssim"
    }

    fn distance(&self, x: &Tensor, y: &Tensor, _keys: &[NoiseKey]) -> Result<Vec<f64>> {
        Ok(dist_neg_ssim(x, y)?.into_iter().map(|v| (1.0 + v).max(0.0)).collect())
    }
}

/// A frozen convolutional feature pyramid used as a perceptual distance.
///
/// Each level is `convs_per_level × (conv3x3 → ReLU)`, with 2× average
/// pooling before every level but the first; the last activation of each
/// level is tapped. Features are unit-normalised along channels at every position
/// and compared with per-channel weights.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    in_channels: usize,
    resolution: usize,
    widths: Vec<usize>,
    convs_per_level: usize,
    params: Params,
    channel_weights: Vec<Vec<f64>>,
}

pub const DEFAULT_EXTRACTOR_WIDTHS: [usize; 4] = [64, 64, 128, 128];
pub const DEFAULT_CONVS_PER_LEVEL: usize = 2;
pub const DEFAULT_EXTRACTOR_SEED: u64 = 0x4c50_4950;

impl FeatureExtractor {
    /// Randomly initialised frozen extractor.
    pub fn random(
        in_channels: usize,
        resolution: usize,
        widths: &[usize],
        convs_per_level: usize,
        seed: u64,
    ) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || convs_per_level == 0 {
            return Err(Error::InvalidArgument(
                "extractor widths and convs per level must be non-empty and positive".into(),
            ));
        }
        let down = 1usize << (widths.len() - 1);
        if resolution % down != 0 {
            return Err(Error::InvalidArgument(format!(
                "extractor resolution {} not divisible by {}",
                resolution, down
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let mut cin = in_channels;
        for (l, &cout) in widths.iter().enumerate() {
            for c in 0..convs_per_level {
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let w: Vec<f64> = standard_normal_vec(&mut rng, cout * cin * 9)
                    .into_iter()
                    .map(|v| v * std)
                    .collect();
                names.push(format!("level{}.conv{}.weight", l, c));
                tensors.push(Tensor::from_vec(&[cout, cin, 3, 3], w)?);
                let b: Vec<f64> = standard_normal_vec(&mut rng, cout).into_iter().map(|v| 0.1 * v).collect();
                names.push(format!("level{}.conv{}.bias", l, c));
                tensors.push(Tensor::from_vec(&[cout], b)?);
                cin = cout;
            }
        }
        let channel_weights = widths.iter().map(|&c| vec![1.0; c]).collect();
        Ok(FeatureExtractor {
            in_channels,
            resolution,
            widths: widths.to_vec(),
            convs_per_level,
            params: Params { names, tensors },
            channel_weights,
        })
    }

    pub fn default_for(in_channels: usize, resolution: usize) -> Result<Self> {
        // as many levels as the resolution halves cleanly
        let levels = (resolution.trailing_zeros() as usize + 1).min(DEFAULT_EXTRACTOR_WIDTHS.len());
        Self::random(
            in_channels,
            resolution,
            &DEFAULT_EXTRACTOR_WIDTHS[..levels],
            DEFAULT_CONVS_PER_LEVEL,
            DEFAULT_EXTRACTOR_SEED,
        )
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels || h != self.resolution || w != self.resolution {
            return Err(Error::Shape(format!(
                "extractor expects {} channels at {}px, got {:?}",
                self.in_channels,
                self.resolution,
                x.shape()
            )));
        }
        Ok(())
    }

    fn features_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut taps = Vec::with_capacity(self.widths.len());
        for l in 0..self.widths.len() {
            if l > 0 {
                h = g.avg_pool2(h)?;
            }
            for c in 0..self.convs_per_level {
                let i = 2 * (l * self.convs_per_level + c);
                let w = g.constant(self.params.tensors[i].clone());
                let b = g.constant(self.params.tensors[i + 1].clone());
                h = g.conv2d(h, w, b, 1)?;
                h = g.relu(h);
            }
            taps.push(h);
        }
        Ok(taps)
    }

    /// Raw feature maps, coarse to fine order reversed: first level first.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let taps = self.features_graph(&mut g, xv)?;
        Ok(taps.iter().map(|&t| g.value(t).clone()).collect())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut m = Manifest::new("feature-extractor");
        m.set("in_channels", self.in_channels);
        m.set("resolution", self.resolution);
        m.set("widths", join(&self.widths));
        m.set("convs_per_level", self.convs_per_level);
        let mut params = self.params.clone();
        for (l, w) in self.channel_weights.iter().enumerate() {
            params.names.push(format!("lin{}.weight", l));
            params.tensors.push(Tensor::from_vec(&[w.len()], w.clone())?);
        }
        checkpoint::save(dir, &m, &params)
    }

    /// Loads extractor weights (for example converted pretrained weights)
    /// saved in the checkpoint layout.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (m, params) = checkpoint::load(dir.as_ref())?;
        m.expect_kind("feature-extractor")?;
        let in_channels = m.get_usize("in_channels")?;
        let resolution = m.get_usize("resolution")?;
        let widths = m.get_usize_list("widths")?;
        let convs = m.get_usize("convs_per_level")?;
        let mut fe = FeatureExtractor::random(in_channels, resolution, &widths, convs, 0)?;
        let n = widths.len();
        let nconv = 2 * n * convs;
        if params.tensors.len() != nconv + n {
            return Err(Error::Shape(format!(
                "extractor checkpoint holds {} tensors, expected {}",
                params.tensors.len(),
                nconv + n
            )));
        }
        for i in 0..nconv {
            if params.tensors[i].shape() != fe.params.tensors[i].shape() {
                return Err(Error::Shape(format!("extractor tensor {} shape", params.names[i])));
            }
        }
        fe.params = Params {
            names: params.names[..nconv].to_vec(),
            tensors: params.tensors[..nconv].to_vec(),
        };
        fe.channel_weights = (0..n)
            .map(|l| {
                let t = &params.tensors[nconv + l];
                if t.len() != widths[l] {
                    return Err(Error::Shape(format!("lin{} weights", l)));
                }
                Ok(t.data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(fe)
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Distance for FeatureExtractor {
    fn name(&self) -> &str {
        "perceptual"
    }

    fn distance(&self, x: &Tensor, y: &Tensor, _keys: &[NoiseKey]) -> Result<Vec<f64>> {
        same_shape(x, y)?;
        self.check_input(x)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let d = self.distance_graph(&mut g, xv, yv)?;
        Ok(g.into_value(d).into_data())
    }
}

impl GraphDistance for FeatureExtractor {
    fn distance_graph(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        let fx = self.features_graph(g, x)?;
        let fy = self.features_graph(g, y)?;
        let mut total: Option<Var> = None;
        for (l, (a, b)) in fx.into_iter().zip(fy).enumerate() {
            let (_, _, h, w) = g.value(a).dims4()?;
            let na = g.channel_normalize(a)?;
            let nb = g.channel_normalize(b)?;
            let d = g.sub(na, nb)?;
            let s = g.weighted_sq_sum(d, Some(self.channel_weights[l].clone()), 1.0 / (h * w) as f64)?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        total.ok_or_else(|| Error::InvalidArgument("extractor has no levels".into()))
    }
}

/// Perceptual distance with an explicit extractor.
pub fn dist_feature_perceptual(ex: &FeatureExtractor, x: &Tensor, y: &Tensor) -> Result<Vec<f64>> {
    ex.distance(x, y, &[])
}

/// `‖u/‖u‖ − v/‖v‖‖²`, evaluated as `2 − 2·cos∠(u, v)` and clamped to `[0, 4]`.
pub fn cosine_sq_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("{} vs {}", u.len(), v.len())));
    }
    let uu: f64 = u.iter().map(|a| a * a).sum();
    let vv: f64 = v.iter().map(|a| a * a).sum();
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let uv: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let cos = uv / (uu * vv).sqrt();
    Ok((2.0 - 2.0 * cos).clamp(0.0, 4.0))
}

/// Mean-over-positions cosine distance between two feature maps of one
/// sample, `(C, H, W)` each, summed into a single value.
fn feature_map_distance(a: &[f64], b: &[f64], c: usize, hw: usize) -> std::result::Result<f64, usize> {
    let mut total = 0.0;
    let mut u = vec![0.0; c];
    let mut v = vec![0.0; c];
    for p in 0..hw {
        for ch in 0..c {
            u[ch] = a[ch * hw + p];
            v[ch] = b[ch * hw + p];
        }
        total += cosine_sq_distance(&u, &v).map_err(|_| p)?;
    }
    Ok(total / hw as f64)
}

/// Decoder-feature distance of a consistency model at a small noise level.
#[derive(Clone)]
pub struct UnetDistance {
    pub model: Arc<ConsistencyModel>,
    pub gamma: usize,
    pub n_z: usize,
}

/// Default feature timestep index (`t_3 ≈ 0.06` on the default schedule).
pub const DEFAULT_GAMMA: usize = 3;

impl UnetDistance {
    pub fn new(model: Arc<ConsistencyModel>, gamma: usize, n_z: usize) -> Result<Self> {
        model.schedule.check_index(gamma)?;
        if n_z == 0 {
            return Err(Error::InvalidArgument("n_z must be >= 1".into()));
        }
        Ok(UnetDistance { model, gamma, n_z })
    }

    /// Noise key for draw `k` of the metric on a row keyed by `key`.
    pub fn metric_key(key: &NoiseKey, k: usize, n_z: usize) -> NoiseKey {
        NoiseKey::new(
            key.seed,
            key.sample,
            splitmix64(key.stream ^ ((key.role as u64) << 48)),
            Role::Metric,
            key.draw * n_z as u64 + k as u64,
        )
    }
}

impl Distance for UnetDistance {
    fn name(&self) -> &str {
        "unet"
    }

    fn distance(&self, x: &Tensor, y: &Tensor, keys: &[NoiseKey]) -> Result<Vec<f64>> {
        dist_unet(&self.model, x, y, self.gamma, self.n_z, keys)
    }
}

/// Monte-Carlo U-Net feature distance. Row `b` uses noise keyed by `keys[b]`
/// and the same noise draw is added to `x[b]` and `y[b]`.
pub fn dist_unet(
    m: &ConsistencyModel,
    x: &Tensor,
    y: &Tensor,
    gamma: usize,
    n_z: usize,
    keys: &[NoiseKey],
) -> Result<Vec<f64>> {
    same_shape(x, y)?;
    m.schedule.check_index(gamma)?;
    if n_z == 0 {
        return Err(Error::InvalidArgument("n_z must be >= 1".into()));
    }
    let rows = x.rows();
    if keys.len() != rows {
        return Err(Error::Shape(format!("{} keys for {} rows", keys.len(), rows)));
    }
    let t = m.schedule.t(gamma);
    let mut out = vec![0.0; rows];
    for k in 0..n_z {
        let zk: Vec<NoiseKey> = keys.iter().map(|key| UnetDistance::metric_key(key, k, n_z)).collect();
        let z = gaussian_rows(&zk, &x.shape()[1..]);
        let xs = x.add_scaled(&z, t)?;
        let ys = y.add_scaled(&z, t)?;
        let both = Tensor::concat_rows(&[&xs, &ys])?;
        let (_, feats) = m.forward_features(&both, &vec![t; 2 * rows])?;
        for (b, o) in out.iter_mut().enumerate() {
            let mut sum = 0.0;
            for (level, f) in feats.iter().enumerate() {
                let (_, c, h, w) = f.dims4()?;
                sum += feature_map_distance(f.row(b), f.row(rows + b), c, h * w).map_err(|p| Error::ZeroFeature {
                    level,
                    sample: b,
                    row: p / w,
                    col: p % w,
                })?;
            }
            *o += sum / n_z as f64;
        }
    }
    Ok(out)
}

/// A distance selected by name: `l2`, `ssim`, `perceptual`, `unet`.
#[derive(Clone)]
pub enum Metric {
    L2(SquaredL2),
    Ssim(SsimDistance),
    Perceptual(FeatureExtractor),
    Unet(UnetDistance),
}

pub const METRIC_NAMES: [&str; 4] = ["l2", "ssim", "perceptual", "unet"];

/// What a metric may need beyond its name.
#[derive(Clone, Default)]
pub struct MetricContext {
    pub in_channels: usize,
    pub resolution: usize,
    pub extractor: Option<FeatureExtractor>,
    pub consistency: Option<Arc<ConsistencyModel>>,
    pub gamma: Option<usize>,
    pub n_z: Option<usize>,
}

impl Metric {
    pub fn from_name(name: &str, ctx: &MetricContext) -> Result<Metric> {
        match name {
            "l2" => Ok(Metric::L2(SquaredL2)),
            "ssim" => Ok(Metric::Ssim(SsimDistance)),
            "perceptual" => Ok(Metric::Perceptual(match &ctx.extractor {
                Some(e) => e.clone(),
                None => FeatureExtractor::default_for(ctx.in_channels, ctx.resolution)?,
            })),
            "unet" => {
                let m = ctx
                    .consistency
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("unet metric needs a consistency model".into()))?;
                Ok(Metric::Unet(UnetDistance::new(
                    m,
                    ctx.gamma.unwrap_or(DEFAULT_GAMMA),
                    ctx.n_z.unwrap_or(1),
                )?))
            }
            other => Err(Error::InvalidArgument(format!(
                "unknown metric '{}' (expected one of {:?})",
                other, METRIC_NAMES
            ))),
        }
    }

    pub fn as_distance(&self) -> &dyn Distance {
        match self {
            Metric::L2(d) => d,
            Metric::Ssim(d) => d,
            Metric::Perceptual(d) => d,
            Metric::Unet(d) => d,
        }
    }

    /// The metric as a differentiable training distance, when it is one.
    pub fn as_graph_distance(&self) -> Option<&dyn GraphDistance> {
        match self {
            Metric::L2(d) => Some(d),
            Metric::Perceptual(d) => Some(d),
            _ => None,
        }
    }
}

impl Distance for Metric {
    fn name(&self) -> &str {
        self.as_distance().name()
    }

    fn distance(&self, x: &Tensor, y: &Tensor, keys: &[NoiseKey]) -> Result<Vec<f64>> {
        self.as_distance().distance(x, y, keys)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_images(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn l2_examples() {
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        let y = Tensor::full(&[1, 1, 2, 2], 1.0);
        assert_eq!(dist_l2(&x, &y).unwrap(), vec![4.0]);
        assert_eq!(dist_l2(&y, &y).unwrap(), vec![0.0]);
        assert!(dist_l2(&x, &Tensor::zeros(&[1, 1, 2, 3])).is_err());
    }

    #[test]
    fn l2_matches_scalar_loop() {
        let x = rand_images(1, &[3, 3, 5, 5]);
        let y = rand_images(2, &[3, 3, 5, 5]);
        let d = dist_l2(&x, &y).unwrap();
        for (r, dr) in d.iter().enumerate() {
            let mut acc = 0.0;
            for i in 0..75 {
                let diff = x.data()[r * 75 + i] - y.data()[r * 75 + i];
                acc += diff * diff;
            }
            assert!((dr - acc).abs() < 1e-12);
        }
    }

    /// Direct per-window SSIM without integral images.
    fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let c1 = (0.01f64 * 2.0).powi(2);
        let c2 = (0.03f64 * 2.0).powi(2);
        let mut tot = 0.0;
        let mut cnt = 0.0;
        for y0 in 0..=h - 7 {
            for x0 in 0..=w - 7 {
                let mut px = Vec::new();
                let mut py = Vec::new();
                for yy in y0..y0 + 7 {
                    for xx in x0..x0 + 7 {
                        px.push(a[yy * w + xx]);
                        py.push(b[yy * w + xx]);
                    }
                }
                let n = 49.0;
                let mx = px.iter().sum::<f64>() / n;
                let my = py.iter().sum::<f64>() / n;
                let vx = px.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
                let vy = py.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
                let cxy = px.iter().zip(&py).map(|(p, q)| (p - mx) * (q - my)).sum::<f64>() / n;
                tot += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                cnt += 1.0;
            }
        }
        tot / cnt
    }

    #[test]
    fn ssim_against_windowed_oracle() {
        let x = rand_images(3, &[2, 3, 12, 12]);
        let y = rand_images(4, &[2, 3, 12, 12]);
        let d = dist_neg_ssim(&x, &y).unwrap();
        let gx = grayscale(&x).unwrap();
        let gy = grayscale(&y).unwrap();
        for r in 0..2 {
            let o = -ssim_oracle(&gx[r], &gy[r], 12, 12);
            assert!((d[r] - o).abs() < 1e-9, "{} vs {}", d[r], o);
        }
    }

    #[test]
    fn ssim_self_and_constant_images() {
        let x = rand_images(5, &[1, 1, 9, 9]);
        assert!((dist_neg_ssim(&x, &x).unwrap()[0] + 1.0).abs() < 1e-12);
        let (a, b) = (0.3, -0.2);
        let ca = Tensor::full(&[1, 1, 8, 8], a);
        let cb = Tensor::full(&[1, 1, 8, 8], b);
        let c1 = (0.01f64 * 2.0).powi(2);
        let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
        assert!((-dist_neg_ssim(&ca, &cb).unwrap()[0] - expected).abs() < 1e-9);
        assert!(dist_neg_ssim(&Tensor::zeros(&[1, 1, 6, 6]), &Tensor::zeros(&[1, 1, 6, 6])).is_err());
    }

    #[test]
    fn cosine_examples() {
        let u = [0.3, -1.2, 2.0];
        let neg: Vec<f64> = u.iter().map(|v| -v).collect();
        assert_eq!(cosine_sq_distance(&u, &u).unwrap(), 0.0);
        assert_eq!(cosine_sq_distance(&u, &neg).unwrap(), 4.0);
        assert!((cosine_sq_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(cosine_sq_distance(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn cosine_matches_normalised_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..200 {
            let n = rng.random_range(1..10);
            let u: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let direct: f64 = u.iter().zip(&v).map(|(a, b)| (a / nu - b / nv).powi(2)).sum();
            assert!((cosine_sq_distance(&u, &v).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn perceptual_basics() {
        let ex = FeatureExtractor::default_for(3, 8).unwrap();
        let x = rand_images(6, &[2, 3, 8, 8]);
        let y = rand_images(7, &[2, 3, 8, 8]);
        assert_eq!(dist_feature_perceptual(&ex, &x, &x).unwrap(), vec![0.0, 0.0]);
        let a = dist_feature_perceptual(&ex, &x, &y).unwrap();
        let b = dist_feature_perceptual(&ex, &y, &x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
            assert!(*p > 0.0);
        }
        assert!(dist_feature_perceptual(&ex, &rand_images(1, &[1, 3, 16, 16]), &rand_images(2, &[1, 3, 16, 16])).is_err());
    }

    #[test]
    fn extractor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ex = FeatureExtractor::random(1, 8, &[4, 8], 2, 3).unwrap();
        ex.save(dir.path()).unwrap();
        let back = FeatureExtractor::load(dir.path()).unwrap();
        let x = rand_images(1, &[2, 1, 8, 8]);
        let y = rand_images(2, &[2, 1, 8, 8]);
        assert_eq!(
            dist_feature_perceptual(&ex, &x, &y).unwrap(),
            dist_feature_perceptual(&back, &x, &y).unwrap()
        );
    }

    #[test]
    fn metric_registry() {
        let ctx = MetricContext {
            in_channels: 3,
            resolution: 8,
            ..Default::default()
        };
        for name in ["l2", "ssim", "perceptual"] {
            assert_eq!(Metric::from_name(name, &ctx).unwrap().name(), name);
        }
        assert!(Metric::from_name("unet", &ctx).is_err());
        assert!(Metric::from_name("lpips", &ctx).is_err());
    }
}
