// Probability-flow ODE in closed form, the consistency map built on it and
// its forward-sensitivity Jacobian.

use dislab::dynamics::{solve_pf_ode, ConsistencyFunction, Integrator};
use dislab::mixture::GaussianMixture;
use dislab::schedule::NoiseSchedule;
use dislab::point;

pub fn run_example() -> anyhow::Result<()> {
    // A single Gaussian N(mu, s^2) has the flow mu + (x - mu) sqrt((s^2 + t1^2) / (s^2 + t0^2)).
    let (mu, s) = (0.3, 0.2);
    let single = GaussianMixture::new(vec![point(&[mu])], s)?;
    let x = point(&[1.5]);
    let got = solve_pf_ode(&single, 2.0, 1e-3, &x, 200, Integrator::Heun)?;
    let exact = mu + (x[0] - mu) * ((s * s + 1e-6) / (s * s + 4.0)).sqrt();
    println!("single gaussian: heun={:.6} exact={exact:.6}", got[0]);
    anyhow::ensure!((got[0] - exact).abs() < 1e-4);

    let gmm = GaussianMixture::five_mode_toy();
    let schedule = NoiseSchedule::toy();
    let g = ConsistencyFunction::for_schedule(&gmm, &schedule);
    for (sigma, x) in [(1.0, point(&[1.0, 0.4])), (2.0, point(&[-0.3, 0.9]))] {
        let sens = g.jacobian(sigma, &x)?;
        println!(
            "g({sigma}, {:?}) = ({:+.4}, {:+.4}) -> mode {}, |J|_F = {:.3}",
            x.as_slice(),
            sens.value[0],
            sens.value[1],
            gmm.nearest_mode(&sens.value),
            sens.jacobian.norm()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run_example()
}
