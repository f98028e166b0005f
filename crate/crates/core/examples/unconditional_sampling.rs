// Ancestral sampling on the Karras ladder and the resulting mode histogram.

use dislab::dynamics::sample_unconditional;
use dislab::mixture::GaussianMixture;
use dislab::rng::{derive_seed, stream};
use dislab::schedule::NoiseSchedule;

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let mut counts = [0usize; 5];
    for run in 0..200 {
        let mut rng = stream(derive_seed(7, run), 0, "dynamics");
        let out = sample_unconditional(&gmm, &schedule, &mut rng)?;
        counts[gmm.nearest_mode(&out.final_sample)] += 1;
    }
    println!("mode counts over 200 runs: {counts:?}");
    anyhow::ensure!(counts.iter().all(|&c| c > 10));
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
