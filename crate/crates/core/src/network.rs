//! A small time-conditioned U-Net shared by the denoiser and the consistency
//! function. The decoder exposes one feature tap per stage, taken after the
//! stage's last residual block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::standard_normal_vec;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UNetConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub n_res_blocks_per_stage: usize,
    pub in_channels: usize,
    pub resolution: usize,
    pub seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            n_res_blocks_per_stage: 1,
            in_channels: 3,
            resolution: 32,
            seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 8 || self.base_channels % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "base_channels {} must be even and >= 8",
                self.base_channels
            )));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::InvalidArgument("channel multipliers must be non-empty and positive".into()));
        }
        if self.in_channels == 0 || self.resolution == 0 {
            return Err(Error::InvalidArgument("in_channels and resolution must be positive".into()));
        }
        let down = 1usize << (self.channel_multipliers.len() - 1);
        if self.resolution % down != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {} not divisible by {}",
                self.resolution, down
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.base_channels
    }
}

pub fn group_count(channels: usize) -> usize {
    gcd(channels, 8)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl Params {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn same_layout(&self, other: &Params) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// All values concatenated in order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.count());
        for t in &self.tensors {
            v.extend_from_slice(t.data());
        }
        v
    }

    /// Inverse of [`Params::flatten`] against this layout.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Params> {
        if flat.len() != self.count() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.count()
            )));
        }
        let mut off = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let n = t.len();
                let out = Tensor::from_vec(t.shape(), flat[off..off + n].to_vec()).unwrap();
                off += n;
                out
            })
            .collect();
        Ok(Params {
            names: self.names.clone(),
            tensors,
        })
    }

    /// In-place `self = mu·self + (1 − mu)·online`.
    pub fn ema_from(&mut self, online: &Params, mu: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::InvalidArgument(format!("ema decay {} outside [0, 1]", mu)));
        }
        if !self.same_layout(online) {
            return Err(Error::Shape("ema update between different layouts".into()));
        }
        for (t, o) in self.tensors.iter_mut().zip(&online.tensors) {
            for (a, b) in t.data_mut().iter_mut().zip(o.data()) {
                *a = mu * *a + (1.0 - mu) * b;
            }
        }
        Ok(())
    }
}

/// `mu·target + (1 − mu)·online`, elementwise.
pub fn ema_update(target: &Params, online: &Params, mu: f64) -> Result<Params> {
    let mut out = target.clone();
    out.ema_from(online, mu)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

#[derive(Clone)]
struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    k: usize,
}

#[derive(Clone, Copy, Debug)]
struct Dense {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    groups: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    emb: Dense,
    norm2: Norm,
    conv2: Conv,
    skip: Option<Conv>,
}

#[derive(Clone)]
struct EncoderStage {
    blocks: Vec<ResBlock>,
    downsample: bool,
}

#[derive(Clone)]
struct DecoderStage {
    blocks: Vec<ResBlock>,
    upsample: Option<Conv>,
}

#[derive(Default)]
struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, gain: f64) -> Conv {
        let std = gain / ((cin * k * k) as f64).sqrt();
        Conv {
            w: self.add(format!("{}.weight", name), vec![cout, cin, k, k], Init::Normal(std)),
            b: self.add(format!("{}.bias", name), vec![cout], Init::Zeros),
            k,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> Dense {
        let std = 1.0 / (din as f64).sqrt();
        Dense {
            w: self.add(format!("{}.weight", name), vec![dout, din], Init::Normal(std)),
            b: self.add(format!("{}.bias", name), vec![dout], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{}.gamma", name), vec![c], Init::Ones),
            beta: self.add(format!("{}.beta", name), vec![c], Init::Zeros),
            groups: group_count(c),
        }
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{}.norm1", name), cin),
            conv1: self.conv(&format!("{}.conv1", name), cin, cout, 3, 1.0),
            emb: self.dense(&format!("{}.emb", name), emb, cout),
            norm2: self.norm(&format!("{}.norm2", name), cout),
            conv2: self.conv(&format!("{}.conv2", name), cout, cout, 3, 1.0),
            skip: (cin != cout).then(|| self.conv(&format!("{}.skip", name), cin, cout, 1, 1.0)),
        }
    }
}

/// Layer layout derived deterministically from a [`UNetConfig`].
#[derive(Clone)]
pub struct UNet {
    cfg: UNetConfig,
    specs: Vec<Spec>,
    emb1: Dense,
    emb2: Dense,
    conv_in: Conv,
    encoder: Vec<EncoderStage>,
    mid: ResBlock,
    decoder: Vec<DecoderStage>,
    norm_out: Norm,
    conv_out: Conv,
}

pub struct UNetOutput {
    pub out: Var,
    /// Decoder taps from the coarsest stage to the finest.
    pub features: Vec<Var>,
    /// Graph handles of every parameter, in [`Params`] order.
    pub params: Vec<Var>,
}

/// Scale applied to the noise conditioning value before the sinusoidal
/// embedding so that its frequencies resolve the conditioning range.
const EMBED_SCALE: f64 = 1000.0;

pub fn sinusoidal_embedding(values: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let x = v * EMBED_SCALE;
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            data.push((x * freq).cos());
        }
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            data.push((x * freq).sin());
        }
    }
    Tensor::from_vec(&[values.len(), 2 * half], data).expect("sized")
}

impl UNet {
    pub fn new(cfg: &UNetConfig) -> Result<UNet> {
        cfg.validate()?;
        let mut b = Builder::default();
        let base = cfg.base_channels;
        let ed = cfg.embedding_dim();
        let emb1 = b.dense("time.fc1", ed, ed);
        let emb2 = b.dense("time.fc2", ed, ed);
        let conv_in = b.conv("conv_in", cfg.in_channels, base, 3, 1.0);

        let mut skip_channels = vec![base];
        let mut ch = base;
        let mut encoder = Vec::new();
        for (s, &m) in cfg.channel_multipliers.iter().enumerate() {
            let out = base * m;
            let mut blocks = Vec::new();
            for r in 0..cfg.n_res_blocks_per_stage {
                blocks.push(b.res_block(&format!("enc{}.res{}", s, r), ch, out, ed));
                ch = out;
                skip_channels.push(ch);
            }
            let downsample = s + 1 < cfg.stages();
            if downsample {
                skip_channels.push(ch);
            }
            encoder.push(EncoderStage { blocks, downsample });
        }
        let mid = b.res_block("mid", ch, ch, ed);
        let mut decoder = Vec::new();
        for (s, &m) in cfg.channel_multipliers.iter().enumerate().rev() {
            let out = base * m;
            let mut blocks = Vec::new();
            for r in 0..=cfg.n_res_blocks_per_stage {
                let skip = skip_channels.pop().expect("balanced skips");
                blocks.push(b.res_block(&format!("dec{}.res{}", s, r), ch + skip, out, ed));
                ch = out;
            }
            let upsample = (s > 0).then(|| b.conv(&format!("dec{}.up", s), ch, ch, 3, 1.0));
            decoder.push(DecoderStage { blocks, upsample });
        }
        debug_assert!(skip_channels.is_empty());
        let norm_out = b.norm("norm_out", ch);
        let conv_out = b.conv("conv_out", ch, cfg.in_channels, 3, 0.2);
        Ok(UNet {
            cfg: cfg.clone(),
            specs: b.specs,
            emb1,
            emb2,
            conv_in,
            encoder,
            mid,
            decoder,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn param_count(&self) -> usize {
        self.specs.iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    pub fn n_decoder_stages(&self) -> usize {
        self.decoder.len()
    }

    /// Deterministic initialisation from the config seed.
    pub fn init(&self) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut names = Vec::with_capacity(self.specs.len());
        let mut tensors = Vec::with_capacity(self.specs.len());
        for s in &self.specs {
            let n = s.shape.iter().product();
            let data = match s.init {
                Init::Normal(std) => standard_normal_vec(&mut rng, n).into_iter().map(|v| v * std).collect(),
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
            };
            names.push(s.name.clone());
            tensors.push(Tensor::from_vec(&s.shape, data).expect("spec shape"));
        }
        Params { names, tensors }
    }

    pub fn check_params(&self, p: &Params) -> Result<()> {
        let ok = p.tensors.len() == self.specs.len()
            && self
                .specs
                .iter()
                .zip(p.names.iter().zip(&p.tensors))
                .all(|(s, (n, t))| &s.name == n && s.shape == t.shape());
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match the network layout".into()))
        }
    }

    /// Records a forward pass on `g`. With `trainable`, parameters become
    /// gradient leaves; otherwise they are constants.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &Params,
        x: Var,
        c_noise: &[f64],
        trainable: bool,
    ) -> Result<UNetOutput> {
        self.check_params(params)?;
        let (bs, c, h, w) = g.value(x).dims4()?;
        if c != self.cfg.in_channels || h != self.cfg.resolution || w != self.cfg.resolution {
            return Err(Error::Shape(format!(
                "input {:?} does not match network ({} channels, {}px)",
                g.value(x).shape(),
                self.cfg.in_channels,
                self.cfg.resolution
            )));
        }
        if c_noise.len() != bs {
            return Err(Error::Shape(format!("{} noise levels for batch {}", c_noise.len(), bs)));
        }
        let pv: Vec<Var> = params
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();

        let sin = g.constant(sinusoidal_embedding(c_noise, self.cfg.embedding_dim()));
        let e = g.linear(sin, pv[self.emb1.w], pv[self.emb1.b])?;
        let e = g.silu(e);
        let e = g.linear(e, pv[self.emb2.w], pv[self.emb2.b])?;
        let e_act = g.silu(e);

        let conv = |g: &mut Graph, c: Conv, x: Var| g.conv2d(x, pv[c.w], pv[c.b], c.k / 2);
        let norm = |g: &mut Graph, n: Norm, x: Var| g.group_norm(x, pv[n.gamma], pv[n.beta], n.groups);
        let res = |g: &mut Graph, blk: &ResBlock, x: Var| -> Result<Var> {
            let h = norm(g, blk.norm1, x)?;
            let h = g.silu(h);
            let h = conv(g, blk.conv1, h)?;
            let t = g.linear(e_act, pv[blk.emb.w], pv[blk.emb.b])?;
            let h = g.add_channel(h, t)?;
            let h = norm(g, blk.norm2, h)?;
            let h = g.silu(h);
            let h = conv(g, blk.conv2, h)?;
            let skip = match blk.skip {
                Some(s) => conv(g, s, x)?,
                None => x,
            };
            g.add(h, skip)
        };

        let mut h = conv(g, self.conv_in, x)?;
        let mut skips = vec![h];
        for stage in &self.encoder {
            for blk in &stage.blocks {
                h = res(g, blk, h)?;
                skips.push(h);
            }
            if stage.downsample {
                h = g.avg_pool2(h)?;
                skips.push(h);
            }
        }
        h = res(g, &self.mid, h)?;
        let mut features = Vec::with_capacity(self.decoder.len());
        for stage in &self.decoder {
            for blk in &stage.blocks {
                let s = skips.pop().expect("balanced skips");
                let cat = g.concat_channels(h, s)?;
                h = res(g, blk, cat)?;
            }
            features.push(h);
            if let Some(up) = stage.upsample {
                h = conv(g, up, h)?;
                h = g.upsample2(h)?;
            }
        }
        let h = norm(g, self.norm_out, h)?;
        let h = g.silu(h);
        let out = conv(g, self.conv_out, h)?;
        Ok(UNetOutput {
            out,
            features,
            params: pv,
        })
    }

    /// Gradient-free forward returning the output and the decoder features.
    pub fn infer(&self, params: &Params, x: &Tensor, c_noise: &[f64]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let o = self.forward(&mut g, params, xv, c_noise, false)?;
        let feats = o.features.iter().map(|&f| g.value(f).clone()).collect();
        Ok((g.into_value(o.out), feats))
    }
}

/// Builds the layout and a freshly initialised parameter set.
pub fn init_unet(cfg: &UNetConfig) -> Result<(UNet, Params)> {
    let net = UNet::new(cfg)?;
    let p = net.init();
    Ok((net, p))
}
