//! Variance-exploding diffusion: noise schedule, preconditioned denoiser,
//! denoising score matching and the second-order probability-flow ODE solver.

use log::debug;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, Var};
use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::network::{Params, UNet, UNetConfig};
use crate::optim::Adam;
use crate::rng::{seeded, standard_normal_vec};
use crate::tensor::Tensor;

/// Noise levels `eps = t_0 < t_1 < … < t_N = T`.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule {
    t: Vec<f64>,
    eps: f64,
    t_max: f64,
    rho: f64,
}

pub const DEFAULT_N: usize = 17;
pub const DEFAULT_EPS: f64 = 0.002;
pub const DEFAULT_T: f64 = 80.0;
pub const DEFAULT_RHO: f64 = 7.0;
pub const DEFAULT_SIGMA_DATA: f64 = 0.5;

/// `t_i = (eps^{1/ρ} + i/N · (T^{1/ρ} − eps^{1/ρ}))^ρ`, with both endpoints
/// pinned exactly.
pub fn karras_schedule(n: usize, eps: f64, t_max: f64, rho: f64) -> Result<SigmaSchedule> {
    if n < 1 {
        return Err(Error::InvalidArgument("schedule needs N >= 1".into()));
    }
    if !(eps > 0.0 && eps < t_max && t_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("need 0 < eps < T, got eps={} T={}", eps, t_max)));
    }
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::InvalidArgument(format!("rho {} < 1", rho)));
    }
    let lo = eps.powf(1.0 / rho);
    let hi = t_max.powf(1.0 / rho);
    let mut t: Vec<f64> = (0..=n)
        .map(|i| (lo + i as f64 / n as f64 * (hi - lo)).powf(rho))
        .collect();
    t[0] = eps;
    t[n] = t_max;
    if t.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("schedule is not strictly increasing at this precision".into()));
    }
    Ok(SigmaSchedule { t, eps, t_max, rho })
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        karras_schedule(DEFAULT_N, DEFAULT_EPS, DEFAULT_T, DEFAULT_RHO).expect("valid defaults")
    }
}

impl SigmaSchedule {
    pub fn t(&self, i: usize) -> f64 {
        self.t[i]
    }

    pub fn levels(&self) -> &[f64] {
        &self.t
    }

    /// Number of intervals `N`.
    pub fn n(&self) -> usize {
        self.t.len() - 1
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn check_index(&self, i: usize) -> Result<()> {
        if i > self.n() {
            Err(Error::IndexOutOfRange { index: i, max: self.n() })
        } else {
            Ok(())
        }
    }
}

/// EDM preconditioning coefficients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdmPrecond {
    pub sigma_data: f64,
}

impl EdmPrecond {
    pub fn c_skip(&self, s: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (s * s + sd2)
    }

    pub fn c_out(&self, s: f64) -> f64 {
        s * self.sigma_data / (s * s + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, s: f64) -> f64 {
        1.0 / (s * s + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, s: f64) -> f64 {
        s.ln() / 4.0
    }

    /// Loss weight `(σ² + σ_d²) / (σ·σ_d)²`.
    pub fn loss_weight(&self, s: f64) -> f64 {
        (s * s + self.sigma_data * self.sigma_data) / (s * self.sigma_data).powi(2)
    }
}

/// Anything that maps a noisy batch and per-row noise levels to a clean
/// estimate `D(x, σ)`.
pub trait Denoiser: Sync {
    fn schedule(&self) -> &SigmaSchedule;
    fn denoise(&self, x: &Tensor, sigma: &[f64]) -> Result<Tensor>;
}

#[derive(Clone)]
pub struct DenoiserModel {
    pub net: UNet,
    pub params: Params,
    pub sigma_data: f64,
    pub schedule: SigmaSchedule,
}

fn check_sigmas(sigma: &[f64], rows: usize) -> Result<()> {
    if sigma.len() != rows {
        return Err(Error::Shape(format!("{} noise levels for {} rows", sigma.len(), rows)));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::InvalidArgument(format!("noise level {} must be positive", s)));
    }
    Ok(())
}

impl DenoiserModel {
    pub fn new(cfg: &UNetConfig, sigma_data: f64, schedule: SigmaSchedule) -> Result<Self> {
        if !(sigma_data > 0.0) {
            return Err(Error::InvalidArgument("sigma_data must be positive".into()));
        }
        let net = UNet::new(cfg)?;
        let params = net.init();
        Ok(DenoiserModel {
            net,
            params,
            sigma_data,
            schedule,
        })
    }

    pub fn precond(&self) -> EdmPrecond {
        EdmPrecond {
            sigma_data: self.sigma_data,
        }
    }

    /// Records `D(x_noisy, σ)` on a graph. `x_noisy` must be a constant.
    pub fn denoise_graph(
        &self,
        g: &mut Graph,
        params: &Params,
        x_noisy: Var,
        sigma: &[f64],
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let pc = self.precond();
        check_sigmas(sigma, g.value(x_noisy).rows())?;
        let c_in: Vec<f64> = sigma.iter().map(|&s| pc.c_in(s)).collect();
        let c_noise: Vec<f64> = sigma.iter().map(|&s| pc.c_noise(s)).collect();
        let c_skip: Vec<f64> = sigma.iter().map(|&s| pc.c_skip(s)).collect();
        let c_out: Vec<f64> = sigma.iter().map(|&s| pc.c_out(s)).collect();
        let scaled = g.scale_rows(x_noisy, c_in)?;
        let o = self.net.forward(g, params, scaled, &c_noise, trainable)?;
        let skip = g.scale_rows(x_noisy, c_skip)?;
        let out = g.scale_rows(o.out, c_out)?;
        Ok((g.add(skip, out)?, o.params))
    }
}

impl Denoiser for DenoiserModel {
    fn schedule(&self) -> &SigmaSchedule {
        &self.schedule
    }

    fn denoise(&self, x: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (d, _) = self.denoise_graph(&mut g, &self.params, xv, sigma, false)?;
        Ok(g.into_value(d))
    }
}

/// `D(x, σ)` with a single noise level for the whole batch.
pub fn denoise(d: &impl Denoiser, x_noisy: &Tensor, sigma: f64) -> Result<Tensor> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("noise level {} must be positive", sigma)));
    }
    d.denoise(x_noisy, &vec![sigma; x_noisy.rows()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossWeighting {
    /// Plain `‖D(x + σz, σ) − x‖²`.
    Unweighted,
    /// EDM weighting `(σ² + σ_d²)/(σ·σ_d)²`.
    Edm,
}

/// Log-normal training noise levels, `ln σ ~ N(P_mean, P_std²)`.
pub const P_MEAN: f64 = -1.2;
pub const P_STD: f64 = 1.2;

/// The random quantities of one score-matching estimate.
#[derive(Clone, Debug)]
pub struct DsmDraws {
    pub sigma: Vec<f64>,
    pub noise: Tensor,
}

impl DsmDraws {
    pub fn sample(batch: &Tensor, schedule: &SigmaSchedule, rng: &mut ChaCha8Rng) -> DsmDraws {
        let normal = Normal::new(P_MEAN, P_STD).expect("valid normal");
        let sigma: Vec<f64> = (0..batch.rows())
            .map(|_| normal.sample(rng).exp().clamp(schedule.eps(), schedule.t_max()))
            .collect();
        let noise = Tensor::from_vec(batch.shape(), standard_normal_vec(rng, batch.len())).expect("sized");
        DsmDraws { sigma, noise }
    }
}

fn dsm_weights(sigma: &[f64], weighting: LossWeighting, pc: EdmPrecond) -> Vec<f64> {
    let b = sigma.len() as f64;
    sigma
        .iter()
        .map(|&s| match weighting {
            LossWeighting::Unweighted => 1.0 / b,
            LossWeighting::Edm => pc.loss_weight(s) / b,
        })
        .collect()
}

/// Batch mean of `w(σ)·‖D(x + σz, σ) − x‖²` for any denoiser, gradient-free.
pub fn dsm_loss_with(
    d: &impl Denoiser,
    batch: &Tensor,
    draws: &DsmDraws,
    weighting: LossWeighting,
    sigma_data: f64,
) -> Result<f64> {
    let noisy = batch.add_scaled_rows(&draws.noise, &draws.sigma)?;
    let den = d.denoise(&noisy, &draws.sigma)?;
    let w = dsm_weights(&draws.sigma, weighting, EdmPrecond { sigma_data });
    let diff = den.sub(batch)?;
    Ok((0..batch.rows())
        .map(|r| w[r] * diff.row(r).iter().map(|v| v * v).sum::<f64>())
        .sum())
}

/// Score-matching loss with fresh draws from `rng`.
pub fn dsm_loss(m: &DenoiserModel, batch: &ImageBatch, rng: &mut ChaCha8Rng, weighting: LossWeighting) -> Result<f64> {
    let draws = DsmDraws::sample(batch.tensor(), &m.schedule, rng);
    dsm_loss_with(m, batch.tensor(), &draws, weighting, m.sigma_data)
}

/// Loss value and parameter gradients for `params` under fixed draws.
pub fn dsm_loss_grad(
    m: &DenoiserModel,
    params: &Params,
    batch: &Tensor,
    draws: &DsmDraws,
    weighting: LossWeighting,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let noisy = g.constant(batch.add_scaled_rows(&draws.noise, &draws.sigma)?);
    let (den, pv) = m.denoise_graph(&mut g, params, noisy, &draws.sigma, true)?;
    let target = g.constant(batch.clone());
    let diff = g.sub(den, target)?;
    let per = g.weighted_sq_sum(diff, None, 1.0)?;
    let loss = g.dot(per, dsm_weights(&draws.sigma, weighting, m.precond()))?;
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss);
    let gs = pv
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, gs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrainConfig {
    pub unet: UNetConfig,
    pub schedule_n: usize,
    pub eps: f64,
    pub t_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weighting: LossWeighting,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            unet: UNetConfig::default(),
            schedule_n: DEFAULT_N,
            eps: DEFAULT_EPS,
            t_max: DEFAULT_T,
            rho: DEFAULT_RHO,
            sigma_data: DEFAULT_SIGMA_DATA,
            steps: 1000,
            batch_size: 16,
            lr: 1e-4,
            weighting: LossWeighting::Edm,
            seed: 0,
        }
    }
}

/// Losses above this are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

pub(crate) fn check_loss(step: usize, loss: f64) -> Result<()> {
    if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
        return Err(Error::Diverged { step, loss });
    }
    Ok(())
}

pub(crate) fn sample_batch(data: &Tensor, batch_size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = data.rows();
    let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
    data.select_rows(&idx)
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<f64>,
}

/// Trains a denoiser with Adam on random minibatches of `data`.
pub fn train_diffusion(cfg: &DiffusionTrainConfig, data: &ImageBatch) -> Result<(DenoiserModel, TrainLog)> {
    let mut unet = cfg.unet.clone();
    unet.in_channels = data.channels();
    unet.resolution = data.resolution();
    let schedule = karras_schedule(cfg.schedule_n, cfg.eps, cfg.t_max, cfg.rho)?;
    let mut model = DenoiserModel::new(&unet, cfg.sigma_data, schedule)?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut opt = Adam::new(&model.params, cfg.lr);
    let mut rng = seeded(cfg.seed);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let batch = sample_batch(data.tensor(), cfg.batch_size, &mut rng);
        let draws = DsmDraws::sample(&batch, &model.schedule, &mut rng);
        let (loss, grads) = dsm_loss_grad(&model, &model.params, &batch, &draws, cfg.weighting)?;
        check_loss(step, loss)?;
        opt.step(&mut model.params, &grads)?;
        log.losses.push(loss);
        if step % 100 == 0 {
            debug!("diffusion step {} loss {:.5}", step, loss);
        }
    }
    Ok((model, log))
}

/// One solver interval from `t_{from_idx}` to `t_{from_idx − 1}`. Heun's
/// corrector is applied unless the interval ends at `t_0`, where a plain
/// Euler step is taken.
pub fn heun_step(d: &(impl Denoiser + ?Sized), x: &Tensor, from_idx: usize) -> Result<Tensor> {
    heun_step_rows(d, x, &vec![from_idx; x.rows()])
}

/// [`heun_step`] with a starting index per row.
pub fn heun_step_rows(d: &(impl Denoiser + ?Sized), x: &Tensor, from_idx: &[usize]) -> Result<Tensor> {
    let s = d.schedule();
    let rows = x.rows();
    if from_idx.len() != rows {
        return Err(Error::Shape(format!("{} indices for {} rows", from_idx.len(), rows)));
    }
    if let Some(&i) = from_idx.iter().find(|&&i| i == 0 || i > s.n()) {
        return Err(Error::IndexOutOfRange { index: i, max: s.n() });
    }
    let t_cur: Vec<f64> = from_idx.iter().map(|&i| s.t(i)).collect();
    let t_next: Vec<f64> = from_idx.iter().map(|&i| s.t(i - 1)).collect();
    let h: Vec<f64> = t_cur.iter().zip(&t_next).map(|(a, b)| b - a).collect();
    let inv_cur: Vec<f64> = t_cur.iter().map(|t| 1.0 / t).collect();
    let d_cur = x.sub(&d.denoise(x, &t_cur)?)?.scale_rows(&inv_cur)?;
    let mut out = x.add_scaled_rows(&d_cur, &h)?;
    let corrected: Vec<usize> = (0..rows).filter(|&r| from_idx[r] > 1).collect();
    if corrected.is_empty() {
        return Ok(out);
    }
    let xe = out.select_rows(&corrected);
    let tn: Vec<f64> = corrected.iter().map(|&r| t_next[r]).collect();
    let inv_next: Vec<f64> = tn.iter().map(|t| 1.0 / t).collect();
    let d_next = xe.sub(&d.denoise(&xe, &tn)?)?.scale_rows(&inv_next)?;
    for (k, &r) in corrected.iter().enumerate() {
        let (xr, dc, dn) = (x.row(r), d_cur.row(r), d_next.row(k));
        let half = 0.5 * h[r];
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xr[j] + half * (dc[j] + dn[j]);
        }
    }
    Ok(out)
}

/// Integrates `dx/dσ = (x − D(x, σ))/σ` from `t_{from_idx}` down to `t_{to_idx}`.
pub fn heun_solve(d: &(impl Denoiser + ?Sized), x_start: &Tensor, from_idx: usize, to_idx: usize) -> Result<Tensor> {
    let s = d.schedule();
    s.check_index(from_idx)?;
    if to_idx > from_idx {
        return Err(Error::InvalidArgument(format!(
            "cannot solve upwards from {} to {}",
            from_idx, to_idx
        )));
    }
    let mut x = x_start.clone();
    for k in (to_idx + 1..=from_idx).rev() {
        x = heun_step(d, &x, k)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mock::ClosureDenoiser;

    #[test]
    fn schedule_anchors() {
        let s = karras_schedule(17, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.t(0), 0.002);
        assert_eq!(s.t(17), 80.0);
        assert!((s.t(7) - 1.09).abs() < 0.01, "t7 = {}", s.t(7));
        assert!((s.t(3) - 0.06).abs() < 0.005, "t3 = {}", s.t(3));
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(karras_schedule(0, 0.002, 80.0, 7.0).is_err());
        assert!(karras_schedule(5, 0.0, 80.0, 7.0).is_err());
        assert!(karras_schedule(5, 90.0, 80.0, 7.0).is_err());
        assert!(karras_schedule(5, 0.002, 80.0, 0.5).is_err());
    }

    #[test]
    fn preconditioning_limits_and_identity() {
        let pc = EdmPrecond { sigma_data: 0.5 };
        assert!((pc.c_skip(1e-9) - 1.0).abs() < 1e-12);
        assert!(pc.c_out(1e-9).abs() < 1e-8);
        for s in [0.003, 0.3, 2.0, 70.0] {
            assert!((pc.c_skip(s) * (s * s + 0.25) - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn denoise_rejects_non_positive_sigma() {
        let d = ClosureDenoiser::new(SigmaSchedule::default(), |x, _| Ok(x.clone()));
        let x = Tensor::zeros(&[1, 1, 2, 2]);
        assert!(denoise(&d, &x, 0.0).is_err());
        assert!(denoise(&d, &x, -1.0).is_err());
        assert_eq!(denoise(&d, &x, 0.5).unwrap(), x);
    }

    #[test]
    fn heun_zero_interval_and_zero_drift() {
        let d = ClosureDenoiser::new(SigmaSchedule::default(), |x, _| Ok(x.clone()));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.3, -1.0, 2.0, 0.0]).unwrap();
        assert_eq!(heun_solve(&d, &x, 5, 5).unwrap(), x);
        assert_eq!(heun_solve(&d, &x, 17, 0).unwrap(), x);
        assert!(heun_solve(&d, &x, 18, 0).is_err());
        assert!(heun_solve(&d, &x, 3, 4).is_err());
    }
}
