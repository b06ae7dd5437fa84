//! Multiscale denoising residuals as a novelty score: residual norms at a
//! few noise levels, fitted with a Gaussian on training images.

#[path = "shared/mod.rs"]
mod shared;

use projection_regret::evaluation::auroc;
use projection_regret::scoring::{batch_score, MsmaScorer};

fn main() -> projection_regret::Result<()> {
    let split = shared::toy_split()?;
    let den = shared::denoiser(&split.train)?;
    let fit_on = split.train.select(&(0..64).collect::<Vec<_>>());
    let scorer = MsmaScorer::fit(&den, vec![2, 4, 6, 8, 10], 4, &fit_on, 1)?;
    let id = batch_score(&split.id, &scorer, 0)?;
    let ood = batch_score(&split.ood, &scorer, 0)?;
    println!("MSMA AUROC {:.3}", auroc(&id, &ood)?);
    Ok(())
}
