// Scores four stand-ins for a posterior sample by their exact-posterior
// log-density at x_t = (1, 0.4), sigma_t = 1.

use dislab::analysis::{compare_approximations, default_noise_scale, ApproxMethod};
use dislab::mixture::GaussianMixture;
use dislab::point;
use dislab::rng::stream;
use dislab::schedule::NoiseSchedule;

pub fn run_example() -> anyhow::Result<()> {
    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let x_t = point(&[1.0, 0.4]);
    let report = compare_approximations(&gmm, &schedule, &x_t, 1.0, default_noise_scale(1.0), 200, &mut stream(0, 0, "example"))?;
    for m in &report.methods {
        println!("{:<16} median log p(x0|x_t) = {:8.3}", m.method.name(), m.median_log_density());
    }
    let ode = report.method(ApproxMethod::PfOde).median_log_density();
    let mean = report.method(ApproxMethod::PosteriorMean).median_log_density();
    anyhow::ensure!(ode - mean > 10f64.ln());
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
