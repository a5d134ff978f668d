//! Train the tiny 1-D diffusion model on a Gaussian target and check that
//! ancestral sampling reproduces its moments.
//!
//! Usage: cargo run --release --example diffusion_toy

use worldfilm::diffusion::{ancestral_sample_raw, make_schedule, ToyEpsNet};
use worldfilm::util::derive_rng;

fn main() -> worldfilm::Result<()> {
    let (mean, std) = (1.5, 0.5);
    // beta_m large enough that alpha_bar at the final step is ~0, so the
    // standard-normal sampling prior matches the forward marginal
    let schedule = make_schedule(64, 1e-4, 0.3)?;
    let mut net = ToyEpsNet::new(48, schedule.len(), 11);

    let losses = net.train_gaussian(mean, std, &schedule, 8000, 128, 3e-3, 11)?;
    println!("denoising loss: first {:.4}, last {:.4}", losses[0], losses[losses.len() - 1]);

    let mut rng = derive_rng(11, "toy.sample");
    let samples = ancestral_sample_raw(&net, &schedule, 4000, 1, schedule.len(), &mut rng)?;
    let n = samples.len() as f64;
    let got_mean = samples.sum() / n;
    let got_std = (samples.mapv(|v| (v - got_mean) * (v - got_mean)).sum() / n).sqrt();
    println!("target  N({mean:.3}, {std:.3}^2)");
    println!("sampled N({got_mean:.3}, {got_std:.3}^2) over {n} draws");
    Ok(())
}
