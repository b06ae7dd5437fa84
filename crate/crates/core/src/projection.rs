//! Projections onto the learned data manifold: perturb `x` to noise level
//! `t_i` and map it back.
//!
//! * [`project_single`]: one denoiser evaluation, `π(x) = D(x + t_i z, t_i)`.
//! * [`project_full_cm`]: one consistency evaluation, `Π(x) = f(x + t_i z, t_i)`.
//! * [`project_full_ode`]: the probability-flow ODE solved from `t_i` to `t_0`.

use crate::consistency::ConsistencyFn;
use crate::diffusion::{heun_solve, Denoiser, SigmaSchedule};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn perturb(schedule: &SigmaSchedule, x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor> {
    schedule.check_index(i)?;
    if x.shape() != z.shape() {
        return Err(Error::Shape(format!("noise {:?} for images {:?}", z.shape(), x.shape())));
    }
    x.add_scaled(z, schedule.t(i))
}

pub fn project_single(m: &(impl Denoiser + ?Sized), x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor> {
    let xt = perturb(m.schedule(), x, i, z)?;
    let t = m.schedule().t(i);
    m.denoise(&xt, &vec![t; x.rows()])
}

pub fn project_full_cm(m: &(impl ConsistencyFn + ?Sized), x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor> {
    let xt = perturb(m.schedule(), x, i, z)?;
    let t = m.schedule().t(i);
    m.consistency(&xt, &vec![t; x.rows()])
}

pub fn project_full_ode(m: &(impl Denoiser + ?Sized), x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor> {
    let xt = perturb(m.schedule(), x, i, z)?;
    heun_solve(m, &xt, i, 0)
}

/// A projection operator with its model bound.
pub trait Projector: Sync {
    fn schedule(&self) -> &SigmaSchedule;
    fn project(&self, x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor>;
    /// `single` for π, `full` for Π.
    fn kind(&self) -> &'static str;
}

#[derive(Clone, Copy)]
pub struct SingleStep<'a>(pub &'a dyn Denoiser);

#[derive(Clone, Copy)]
pub struct CmFull<'a>(pub &'a dyn ConsistencyFn);

#[derive(Clone, Copy)]
pub struct OdeFull<'a>(pub &'a dyn Denoiser);

impl Projector for SingleStep<'_> {
    fn schedule(&self) -> &SigmaSchedule {
        self.0.schedule()
    }

    fn project(&self, x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor> {
        project_single(self.0, x, i, z)
    }

    fn kind(&self) -> &'static str {
        "single"
    }
}

impl Projector for CmFull<'_> {
    fn schedule(&self) -> &SigmaSchedule {
        self.0.schedule()
    }

    fn project(&self, x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor> {
        project_full_cm(self.0, x, i, z)
    }

    fn kind(&self) -> &'static str {
        "full"
    }
}

impl Projector for OdeFull<'_> {
    fn schedule(&self) -> &SigmaSchedule {
        self.0.schedule()
    }

    fn project(&self, x: &Tensor, i: usize, z: &Tensor) -> Result<Tensor> {
        project_full_ode(self.0, x, i, z)
    }

    fn kind(&self) -> &'static str {
        "full"
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::heun_step;
    use crate::mock::{ClosureConsistency, ClosureDenoiser};
    use crate::rng::{NoiseKey, Role};

    fn setup() -> (Tensor, Tensor) {
        let x = Tensor::from_vec(&[2, 1, 2, 2], (0..8).map(|v| v as f64 / 8.0 - 0.4).collect()).unwrap();
        let key = NoiseKey::new(1, 0, 0, Role::Proj, 0);
        let z = Tensor::from_vec(&[2, 1, 2, 2], key.gaussian(8)).unwrap();
        (x, z)
    }

    #[test]
    fn identity_models_return_the_perturbed_input() {
        let s = SigmaSchedule::default();
        let (x, z) = setup();
        let d = ClosureDenoiser::new(s.clone(), |x, _| Ok(x.clone()));
        let f = ClosureConsistency::passthrough(s.clone());
        for i in [0, 5, 17] {
            let want = x.add_scaled(&z, s.t(i)).unwrap();
            assert_eq!(project_single(&d, &x, i, &z).unwrap(), want);
            assert_eq!(project_full_cm(&f, &x, i, &z).unwrap(), want);
            assert_eq!(project_full_ode(&d, &x, i, &z).unwrap(), want);
        }
        assert!(project_single(&d, &x, 18, &z).is_err());
        assert!(project_full_cm(&f, &x, 1, &z.reshape(&[8]).unwrap()).is_err());
    }

    #[test]
    fn one_interval_is_one_heun_step() {
        let s = SigmaSchedule::default();
        let (x, z) = setup();
        let d = ClosureDenoiser::new(s.clone(), |x, sig| x.scale_rows(&sig.iter().map(|v| 0.5 / (1.0 + v)).collect::<Vec<_>>()));
        for i in [1, 2, 9] {
            let start = x.add_scaled(&z, s.t(i)).unwrap();
            let got = project_full_ode(&d, &x, i, &z).unwrap();
            let mut want = start;
            for k in (1..=i).rev() {
                want = heun_step(&d, &want, k).unwrap();
            }
            assert_eq!(got, want);
        }
    }
}
