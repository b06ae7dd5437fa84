//! Closure-backed denoisers and consistency functions for tests and
//! analytic experiments.

use crate::consistency::ConsistencyFn;
use crate::diffusion::{Denoiser, SigmaSchedule};
use crate::error::Result;
use crate::tensor::Tensor;

type Map = dyn Fn(&Tensor, &[f64]) -> Result<Tensor> + Send + Sync;

pub struct ClosureDenoiser {
    schedule: SigmaSchedule,
    f: Box<Map>,
}

impl ClosureDenoiser {
    pub fn new(
        schedule: SigmaSchedule,
        f: impl Fn(&Tensor, &[f64]) -> Result<Tensor> + Send + Sync + 'static,
    ) -> Self {
        ClosureDenoiser {
            schedule,
            f: Box::new(f),
        }
    }
}

impl Denoiser for ClosureDenoiser {
    fn schedule(&self) -> &SigmaSchedule {
        &self.schedule
    }

    fn denoise(&self, x: &Tensor, sigma: &[f64]) -> Result<Tensor> {
        (self.f)(x, sigma)
    }
}

pub struct ClosureConsistency {
    schedule: SigmaSchedule,
    f: Box<Map>,
}

impl ClosureConsistency {
    pub fn new(
        schedule: SigmaSchedule,
        f: impl Fn(&Tensor, &[f64]) -> Result<Tensor> + Send + Sync + 'static,
    ) -> Self {
        ClosureConsistency {
            schedule,
            f: Box::new(f),
        }
    }

    /// `f(x, t) = x`: every projection returns its noisy input.
    pub fn passthrough(schedule: SigmaSchedule) -> Self {
        Self::new(schedule, |x, _| Ok(x.clone()))
    }
}

impl ConsistencyFn for ClosureConsistency {
    fn schedule(&self) -> &SigmaSchedule {
        &self.schedule
    }

    fn consistency(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        (self.f)(x, t)
    }
}
