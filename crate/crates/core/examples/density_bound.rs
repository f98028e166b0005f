// Checks the posterior density lower bound on noisy draws that stay close
// to their source component.

use dislab::analysis::check_density_bound;
use dislab::mixture::GaussianMixture;
use dislab::rng::stream;
use dislab::schedule::NoiseSchedule;

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    for sigma in [0.25, 0.5, 1.0, 2.0] {
        let r = check_density_bound(&gmm, &schedule, sigma, 500, &mut stream(1, 0, "bound"))?;
        println!(
            "sigma_t={sigma:<4} qualifying={:>3}/{} violations={} min log margin={:.3}",
            r.qualifying,
            r.samples,
            r.violations,
            r.min_log_margin()
        );
        anyhow::ensure!(r.violations == 0);
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
