//! Consistency models: a boundary-exact parametrization of `f(x, t)`,
//! consistency training against an EMA target and distillation from a
//! diffusion teacher.

use log::debug;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::data::ImageBatch;
use crate::diffusion::{
    check_loss, heun_step_rows, karras_schedule, sample_batch, Denoiser, DenoiserModel, SigmaSchedule, TrainLog,
    DEFAULT_EPS, DEFAULT_N, DEFAULT_RHO, DEFAULT_SIGMA_DATA, DEFAULT_T,
};
use crate::distances::{Distance, GraphDistance, Metric, MetricContext};
use crate::error::{Error, Result};
use crate::network::{Params, UNet, UNetConfig};
use crate::optim::Adam;
use crate::rng::{seeded, standard_normal_vec, NoiseKey, Role};
use crate::tensor::Tensor;

/// Anything that maps `(x_t, t)` to an estimate of the trajectory origin.
pub trait ConsistencyFn: Sync {
    fn schedule(&self) -> &SigmaSchedule;
    fn consistency(&self, x: &Tensor, t: &[f64]) -> Result<Tensor>;
}

/// Boundary-exact skip/output coefficients: `c_skip(eps) = 1`, `c_out(eps) = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmPrecond {
    pub sigma_data: f64,
    pub eps: f64,
}

impl CmPrecond {
    pub fn c_skip(&self, t: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        let d = t - self.eps;
        sd2 / (d * d + sd2)
    }

    pub fn c_out(&self, t: f64) -> f64 {
        self.sigma_data * (t - self.eps) / (t * t + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, t: f64) -> f64 {
        1.0 / (t * t + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, t: f64) -> f64 {
        t.ln() / 4.0
    }
}

#[derive(Clone)]
pub struct ConsistencyModel {
    pub net: UNet,
    pub params: Params,
    pub sigma_data: f64,
    pub schedule: SigmaSchedule,
}

pub struct CmGraphOutput {
    pub out: Var,
    pub features: Vec<Var>,
    pub params: Vec<Var>,
}

impl ConsistencyModel {
    pub fn new(cfg: &UNetConfig, sigma_data: f64, schedule: SigmaSchedule) -> Result<Self> {
        if !(sigma_data > 0.0) {
            return Err(Error::InvalidArgument("sigma_data must be positive".into()));
        }
        let net = UNet::new(cfg)?;
        let params = net.init();
        Ok(ConsistencyModel {
            net,
            params,
            sigma_data,
            schedule,
        })
    }

    /// A student sharing the teacher's network, weights and schedule.
    pub fn from_teacher(teacher: &DenoiserModel) -> Self {
        ConsistencyModel {
            net: teacher.net.clone(),
            params: teacher.params.clone(),
            sigma_data: teacher.sigma_data,
            schedule: teacher.schedule.clone(),
        }
    }

    pub fn eps(&self) -> f64 {
        self.schedule.eps()
    }

    pub fn precond(&self) -> CmPrecond {
        CmPrecond {
            sigma_data: self.sigma_data,
            eps: self.schedule.eps(),
        }
    }

    fn check_times(&self, t: &[f64], rows: usize) -> Result<()> {
        if t.len() != rows {
            return Err(Error::Shape(format!("{} times for {} rows", t.len(), rows)));
        }
        let eps = self.eps();
        if let Some(bad) = t.iter().find(|&&v| !(v >= eps)) {
            return Err(Error::InvalidArgument(format!("time {} is below eps = {}", bad, eps)));
        }
        Ok(())
    }

    /// Records `f(x, t)` on a graph; `x` must be a constant.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &Params,
        x: Var,
        t: &[f64],
        trainable: bool,
    ) -> Result<CmGraphOutput> {
        self.check_times(t, g.value(x).rows())?;
        let pc = self.precond();
        let c_in: Vec<f64> = t.iter().map(|&s| pc.c_in(s)).collect();
        let c_noise: Vec<f64> = t.iter().map(|&s| pc.c_noise(s)).collect();
        let c_skip: Vec<f64> = t.iter().map(|&s| pc.c_skip(s)).collect();
        let c_out: Vec<f64> = t.iter().map(|&s| pc.c_out(s)).collect();
        let scaled = g.scale_rows(x, c_in)?;
        let o = self.net.forward(g, params, scaled, &c_noise, trainable)?;
        let skip = g.scale_rows(x, c_skip)?;
        let res = g.scale_rows(o.out, c_out)?;
        Ok(CmGraphOutput {
            out: g.add(skip, res)?,
            features: o.features,
            params: o.params,
        })
    }

    /// `f(x, t)` together with the decoder feature maps of the network.
    pub fn forward_features(&self, x: &Tensor, t: &[f64]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let o = self.forward_graph(&mut g, &self.params, xv, t, false)?;
        let feats = o.features.iter().map(|&f| g.value(f).clone()).collect();
        Ok((g.into_value(o.out), feats))
    }

    fn with_params(&self, params: &Params) -> Result<ConsistencyModel> {
        self.net.check_params(params)?;
        Ok(ConsistencyModel {
            net: self.net.clone(),
            params: params.clone(),
            sigma_data: self.sigma_data,
            schedule: self.schedule.clone(),
        })
    }
}

impl ConsistencyFn for ConsistencyModel {
    fn schedule(&self) -> &SigmaSchedule {
        &self.schedule
    }

    fn consistency(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        Ok(self.forward_features(x, t)?.0)
    }
}

/// `f(x, t)` with one time for the whole batch; `t < eps` is an error.
pub fn consistency_forward(m: &impl ConsistencyFn, x_noisy: &Tensor, t: f64) -> Result<Tensor> {
    let eps = m.schedule().eps();
    if !(t >= eps) {
        return Err(Error::InvalidArgument(format!("time {} is below eps = {}", t, eps)));
    }
    m.consistency(x_noisy, &vec![t; x_noisy.rows()])
}

/// The random quantities of one consistency-loss estimate: an interval index
/// `i ∈ {0, …, N−1}` per row and a shared noise `z` for both noise levels.
#[derive(Clone, Debug)]
pub struct CmDraws {
    pub index: Vec<usize>,
    pub noise: Tensor,
}

impl CmDraws {
    pub fn sample(batch: &Tensor, schedule: &SigmaSchedule, rng: &mut ChaCha8Rng) -> CmDraws {
        let index = (0..batch.rows()).map(|_| rng.random_range(0..schedule.n())).collect();
        let noise = Tensor::from_vec(batch.shape(), standard_normal_vec(rng, batch.len())).expect("sized");
        CmDraws { index, noise }
    }

    pub fn fixed(index: Vec<usize>, noise: Tensor) -> CmDraws {
        CmDraws { index, noise }
    }

    fn check(&self, batch: &Tensor, schedule: &SigmaSchedule) -> Result<()> {
        if self.index.len() != batch.rows() || self.noise.shape() != batch.shape() {
            return Err(Error::Shape("draws do not match the batch".into()));
        }
        if let Some(&i) = self.index.iter().find(|&&i| i >= schedule.n()) {
            return Err(Error::IndexOutOfRange {
                index: i,
                max: schedule.n() - 1,
            });
        }
        Ok(())
    }

    fn times(&self, schedule: &SigmaSchedule, offset: usize) -> Vec<f64> {
        self.index.iter().map(|&i| schedule.t(i + offset)).collect()
    }
}

fn loss_keys(rows: usize) -> Vec<NoiseKey> {
    (0..rows).map(|r| NoiseKey::new(0, r as u64, 0, Role::Misc, 0)).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Inputs at the lower and upper noise level. With a teacher the lower input
/// is one solver step from the upper one instead of `x + t_i z`.
fn loss_inputs(
    schedule: &SigmaSchedule,
    batch: &Tensor,
    draws: &CmDraws,
    teacher: Option<&dyn Denoiser>,
) -> Result<(Tensor, Tensor)> {
    draws.check(batch, schedule)?;
    let hi = batch.add_scaled_rows(&draws.noise, &draws.times(schedule, 1))?;
    let lo = match teacher {
        None => batch.add_scaled_rows(&draws.noise, &draws.times(schedule, 0))?,
        Some(d) => {
            if d.schedule() != schedule {
                return Err(Error::InvalidArgument("teacher and student schedules differ".into()));
            }
            let from: Vec<usize> = draws.index.iter().map(|i| i + 1).collect();
            heun_step_rows(d, &hi, &from)?
        }
    };
    Ok((lo, hi))
}

fn consistency_loss_with(
    online: &dyn ConsistencyFn,
    target: &dyn ConsistencyFn,
    teacher: Option<&dyn Denoiser>,
    batch: &Tensor,
    draws: &CmDraws,
    d: &dyn Distance,
) -> Result<f64> {
    let s = online.schedule();
    if target.schedule() != s {
        return Err(Error::InvalidArgument("online and target schedules differ".into()));
    }
    let (lo, hi) = loss_inputs(s, batch, draws, teacher)?;
    let ft = target.consistency(&lo, &draws.times(s, 0))?;
    let fo = online.consistency(&hi, &draws.times(s, 1))?;
    Ok(mean(&d.distance(&ft, &fo, &loss_keys(batch.rows()))?))
}

/// Batch mean of `d(f⁻(x + t_i z, t_i), f(x + t_{i+1} z, t_{i+1}))`.
pub fn cm_loss_with(
    online: &impl ConsistencyFn,
    target: &impl ConsistencyFn,
    batch: &Tensor,
    draws: &CmDraws,
    d: &dyn Distance,
) -> Result<f64> {
    consistency_loss_with(online, target, None, batch, draws, d)
}

/// As [`cm_loss_with`], with the target's input produced by one teacher
/// solver step from `x + t_{i+1} z` down to `t_i`.
pub fn cd_loss_with(
    online: &impl ConsistencyFn,
    target: &impl ConsistencyFn,
    teacher: &impl Denoiser,
    batch: &Tensor,
    draws: &CmDraws,
    d: &dyn Distance,
) -> Result<f64> {
    consistency_loss_with(online, target, Some(teacher), batch, draws, d)
}

/// Consistency-training loss with fresh draws.
pub fn cm_loss(
    online: &ConsistencyModel,
    target: &ConsistencyModel,
    batch: &ImageBatch,
    d: &dyn Distance,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let draws = CmDraws::sample(batch.tensor(), &online.schedule, rng);
    cm_loss_with(online, target, batch.tensor(), &draws, d)
}

/// Distillation loss with fresh draws.
pub fn cd_loss(
    online: &ConsistencyModel,
    target: &ConsistencyModel,
    teacher: &DenoiserModel,
    batch: &ImageBatch,
    d: &dyn Distance,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let draws = CmDraws::sample(batch.tensor(), &online.schedule, rng);
    cd_loss_with(online, target, teacher, batch.tensor(), &draws, d)
}

/// Loss value and gradients for the online parameters. The target branch is
/// evaluated off the graph, so no gradient reaches it.
pub fn consistency_loss_grad(
    model: &ConsistencyModel,
    online: &Params,
    target: &Params,
    teacher: Option<&dyn Denoiser>,
    batch: &Tensor,
    draws: &CmDraws,
    d: &dyn GraphDistance,
) -> Result<(f64, Vec<Tensor>)> {
    let s = &model.schedule;
    let (lo, hi) = loss_inputs(s, batch, draws, teacher)?;
    let ft = model.with_params(target)?.consistency(&lo, &draws.times(s, 0))?;
    let mut g = Graph::new();
    let hv = g.constant(hi);
    let o = model.forward_graph(&mut g, online, hv, &draws.times(s, 1), true)?;
    let tv = g.constant(ft);
    let per = d.distance_graph(&mut g, tv, o.out)?;
    let rows = batch.rows();
    let loss = g.dot(per, vec![1.0 / rows as f64; rows])?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss);
    let gs = o
        .params
        .iter()
        .zip(&online.tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, gs))
}

pub const DEFAULT_EMA_MU: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyTrainConfig {
    pub unet: UNetConfig,
    pub schedule_n: usize,
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub ema_mu: f64,
    /// Training distance, `l2` or `perceptual`.
    pub metric: String,
    /// With a teacher, start the student from the teacher's weights.
    pub init_from_teacher: bool,
    pub seed: u64,
}

impl Default for ConsistencyTrainConfig {
    fn default() -> Self {
        ConsistencyTrainConfig {
            unet: UNetConfig::default(),
            schedule_n: DEFAULT_N,
            eps: DEFAULT_EPS,
            t_max: DEFAULT_T,
            rho: DEFAULT_RHO,
            sigma_data: DEFAULT_SIGMA_DATA,
            steps: 1000,
            batch_size: 16,
            lr: 1e-4,
            ema_mu: DEFAULT_EMA_MU,
            metric: "l2".into(),
            init_from_teacher: true,
            seed: 0,
        }
    }
}

/// Consistency distillation when `teacher` is given, consistency training
/// otherwise. Returns the EMA copy.
pub fn train_consistency(
    cfg: &ConsistencyTrainConfig,
    data: &ImageBatch,
    teacher: Option<&DenoiserModel>,
) -> Result<(ConsistencyModel, TrainLog)> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.ema_mu) {
        return Err(Error::InvalidArgument(format!("ema_mu {} outside [0, 1]", cfg.ema_mu)));
    }
    let model = match teacher {
        Some(t) => {
            if t.net.config().in_channels != data.channels() || t.net.config().resolution != data.resolution() {
                return Err(Error::Shape("teacher does not match the data".into()));
            }
            if cfg.init_from_teacher {
                ConsistencyModel::from_teacher(t)
            } else {
                ConsistencyModel::new(t.net.config(), t.sigma_data, t.schedule.clone())?
            }
        }
        None => {
            let mut unet = cfg.unet.clone();
            unet.in_channels = data.channels();
            unet.resolution = data.resolution();
            let schedule = karras_schedule(cfg.schedule_n, cfg.eps, cfg.t_max, cfg.rho)?;
            ConsistencyModel::new(&unet, cfg.sigma_data, schedule)?
        }
    };
    let metric = Metric::from_name(
        &cfg.metric,
        &MetricContext {
            in_channels: data.channels(),
            resolution: data.resolution(),
            ..Default::default()
        },
    )?;
    let d = metric
        .as_graph_distance()
        .ok_or_else(|| Error::InvalidArgument(format!("metric '{}' cannot be used for training", cfg.metric)))?;

    let mut online = model.params.clone();
    let mut target = model.params.clone();
    let mut opt = Adam::new(&online, cfg.lr);
    let mut rng = seeded(cfg.seed);
    let mut log = TrainLog::default();
    let teacher_dyn = teacher.map(|t| t as &dyn Denoiser);
    for step in 0..cfg.steps {
        let batch = sample_batch(data.tensor(), cfg.batch_size, &mut rng);
        let draws = CmDraws::sample(&batch, &model.schedule, &mut rng);
        let (loss, grads) = consistency_loss_grad(&model, &online, &target, teacher_dyn, &batch, &draws, d)?;
        check_loss(step, loss)?;
        opt.step(&mut online, &grads)?;
        target.ema_from(&online, cfg.ema_mu)?;
        log.losses.push(loss);
        if step % 100 == 0 {
            debug!("consistency step {} loss {:.5}", step, loss);
        }
    }
    let mut out = model;
    out.params = target;
    Ok((out, log))
}
