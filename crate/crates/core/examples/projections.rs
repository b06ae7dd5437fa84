//! The three projection operators on the same inputs and noise: one denoiser
//! step, one consistency-model call, and the full Heun ODE.

#[path = "shared/mod.rs"]
mod shared;

use projection_regret::consistency::ConsistencyFn;
use projection_regret::projection::{project_full_cm, project_full_ode, project_single};
use projection_regret::rng::{NoiseKey, Role};
use projection_regret::Tensor;

fn main() -> projection_regret::Result<()> {
    let split = shared::toy_split()?;
    let den = shared::denoiser(&split.train)?;
    let cm = shared::consistency(&split.train)?;
    let x = split.id.tensor().select_rows(&[0, 1, 2, 3]);
    let z = Tensor::from_vec(x.shape(), NoiseKey::new(3, 0, 0, Role::Misc, 0).gaussian(x.len()))?;
    let rms = |a: &Tensor| a.sub(&x).expect("same shape").map(|v| v * v).mean().sqrt();

    println!(" i      t_i   single   cm-full  ode-full   (rms change)");
    for i in [0, 2, 4, 6, 8, 10, 12] {
        println!(
            "{:2} {:8.3} {:8.4} {:9.4} {:9.4}",
            i,
            cm.schedule().t(i),
            rms(&project_single(&den, &x, i, &z)?),
            rms(&project_full_cm(&cm, &x, i, &z)?),
            rms(&project_full_ode(&den, &x, i, &z)?),
        );
    }
    Ok(())
}
